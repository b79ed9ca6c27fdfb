//! Accuracy and silhouette instrumentation plus the composite experiments:
//! training-efficiency comparison, open-set robustness, and ablation sweeps.
//!
//! Experiment arms are independent; [`run_arms`] executes them on up to
//! `jobs` worker threads and reassembles results in arm order, so the
//! harness itself introduces no nondeterminism.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{generate_dataset, inject_ood, Dataset, DatasetSpec, OodSpec};
use crate::error::{Error, Result};
use crate::losses::LossMode;
use crate::numerics::Matrix;
use crate::trainer::{run, MetricsRow, MetricsTable, TrainConfig};

/// Fraction of rows whose argmax matches the label; argmax ties break to the
/// lowest index.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    let n = logits.rows();
    if n == 0 {
        return Err(Error::Degenerate("accuracy of an empty set".into()));
    }
    if labels.len() != n {
        return Err(Error::Dimension("accuracy: logits/labels length mismatch".into()));
    }
    let mut hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Mean silhouette score with Euclidean distance. Per point: `a` is the mean
/// intra-cluster distance (excluding self), `b` the minimum over other
/// clusters of the mean distance, and `s = (b - a) / max(a, b)`. Singleton
/// clusters score 0, as does the all-coincident `a = b = 0` case.
pub fn silhouette(features: &Matrix, cluster_ids: &[usize]) -> Result<f64> {
    let n = features.rows();
    if n != cluster_ids.len() {
        return Err(Error::Dimension("silhouette: features/ids length mismatch".into()));
    }
    if n < 3 {
        return Err(Error::Degenerate(format!("silhouette needs n >= 3, got {n}")));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite("silhouette: non-finite feature".into()));
    }
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in cluster_ids.iter().enumerate() {
        clusters.entry(c).or_default().push(i);
    }
    if clusters.len() < 2 {
        return Err(Error::Degenerate("silhouette needs >= 2 non-empty clusters".into()));
    }
    let dist = |i: usize, j: usize| -> f64 {
        features
            .row(i)
            .iter()
            .zip(features.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let own = cluster_ids[i];
        if clusters[&own].len() == 1 {
            continue; // singleton scores 0
        }
        let a = clusters[&own]
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| dist(i, j))
            .sum::<f64>()
            / (clusters[&own].len() - 1) as f64;
        let mut b = f64::INFINITY;
        for (&c, members) in &clusters {
            if c == own {
                continue;
            }
            let mean = members.iter().map(|&j| dist(i, j)).sum::<f64>() / members.len() as f64;
            b = b.min(mean);
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// One experiment arm: a named (config, dataset, optional OOD) triple.
#[derive(Clone, Debug)]
pub struct ArmSpec {
    pub name: String,
    pub config: TrainConfig,
    pub dataset: DatasetSpec,
    pub ood: Option<OodSpec>,
}

/// A completed arm with its descriptor echo and metric trace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmRecord {
    pub name: String,
    pub seed: u64,
    pub loss_mode: String,
    pub ood_count: usize,
    pub metrics: MetricsTable,
}

fn build_dataset(spec: &ArmSpec) -> Result<Dataset> {
    let mut dataset = generate_dataset(&spec.dataset)?;
    if let Some(ood) = &spec.ood {
        dataset.unlabeled = inject_ood(&dataset.unlabeled, ood)?;
    }
    Ok(dataset)
}

fn run_arm(spec: &ArmSpec) -> Result<ArmRecord> {
    let dataset = build_dataset(spec)?;
    let result = run(&spec.config, &dataset)?;
    Ok(ArmRecord {
        name: spec.name.clone(),
        seed: spec.config.seed,
        loss_mode: spec.config.loss_mode.as_str().to_string(),
        ood_count: spec.ood.as_ref().map_or(0, |o| o.count),
        metrics: result.metrics,
    })
}

/// Execute arms on up to `jobs` threads, preserving arm order in the output.
pub fn run_arms(arms: &[ArmSpec], jobs: usize) -> Result<Vec<ArmRecord>> {
    let jobs = jobs.max(1).min(arms.len().max(1));
    if jobs <= 1 {
        return arms.iter().map(run_arm).collect();
    }
    let next = Mutex::new(0usize);
    let slots: Mutex<Vec<Option<Result<ArmRecord>>>> =
        Mutex::new((0..arms.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let idx = {
                    let mut guard = next.lock().unwrap();
                    let idx = *guard;
                    if idx >= arms.len() {
                        return;
                    }
                    *guard += 1;
                    idx
                };
                let result = run_arm(&arms[idx]);
                slots.lock().unwrap()[idx] = Some(result);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("arm not executed")).collect()
}

/// Across-seed aggregate at one checkpoint of one arm family.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AggregateRow {
    pub arm: String,
    pub step: usize,
    pub mean_acc_ema: f64,
    pub std_acc_ema: f64,
    pub mean_silhouette: f64,
    pub std_silhouette: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var =
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// Aggregate arms sharing a family name (arm name minus the seed suffix) at
/// identical checkpoints.
pub fn aggregate(arms: &[ArmRecord]) -> Vec<AggregateRow> {
    let mut families: BTreeMap<String, Vec<&ArmRecord>> = BTreeMap::new();
    for arm in arms {
        let family = arm.name.rsplit_once("-seed").map_or(arm.name.as_str(), |(f, _)| f);
        families.entry(family.to_string()).or_default().push(arm);
    }
    let mut out = Vec::new();
    for (family, members) in families {
        let steps: Vec<usize> = members[0].metrics.rows.iter().map(|r| r.step).collect();
        for (ridx, &step) in steps.iter().enumerate() {
            let accs: Vec<f64> = members
                .iter()
                .filter_map(|m| m.metrics.rows.get(ridx).map(|r| r.acc_ema))
                .collect();
            let sils: Vec<f64> = members
                .iter()
                .filter_map(|m| m.metrics.rows.get(ridx).map(|r| r.silhouette))
                .collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            let (mean_sil, std_sil) = mean_std(&sils);
            out.push(AggregateRow {
                arm: family.clone(),
                step,
                mean_acc_ema: mean_acc,
                std_acc_ema: std_acc,
                mean_silhouette: mean_sil,
                std_silhouette: std_sil,
            });
        }
    }
    out
}

/// Serialized result of a composite experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmRecord>,
    pub aggregates: Vec<AggregateRow>,
    /// Experiment-specific derived statistics.
    pub findings: serde_json::Value,
}

/// Seeds used by default for statistical acceptance (majority rule).
pub const DEFAULT_SEEDS: [u64; 5] = [101, 202, 303, 404, 505];

fn with_seed(base: &TrainConfig, data: &DatasetSpec, seed: u64) -> (TrainConfig, DatasetSpec) {
    let mut cfg = base.clone();
    cfg.seed = seed;
    let mut ds = data.clone();
    ds.seed = seed;
    (cfg, ds)
}

/// Per-seed outcome of the efficiency comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EfficiencySeedOutcome {
    pub seed: u64,
    pub cs_final_acc_ema: f64,
    pub cr_final_acc_ema: f64,
    /// First checkpoint step where the cs+cr arm reaches the cs-only arm's
    /// final EMA accuracy.
    pub crossover_step: Option<usize>,
    pub crossover_fraction: Option<f64>,
    /// Whether silhouette(cs+cr) >= silhouette(cs-only) at every checkpoint
    /// after the first 10% of steps.
    pub silhouette_dominates: bool,
}

fn checkpoint_rows(rows: &[MetricsRow]) -> &[MetricsRow] {
    rows
}

/// Matched cs-only vs cs+cr arms per seed, identical datasets and
/// evaluation checkpoints.
pub fn run_efficiency_experiment(
    base: &TrainConfig,
    data: &DatasetSpec,
    seeds: &[u64],
    jobs: usize,
) -> Result<ExperimentReport> {
    let mut arms = Vec::new();
    for &seed in seeds {
        let (cfg, ds) = with_seed(base, data, seed);
        arms.push(ArmSpec {
            name: format!("cs-only-seed{seed}"),
            config: TrainConfig { loss_mode: LossMode::CsOnly, ..cfg.clone() },
            dataset: ds.clone(),
            ood: None,
        });
        arms.push(ArmSpec {
            name: format!("cs+cr-seed{seed}"),
            config: TrainConfig { loss_mode: LossMode::CsCr, ..cfg },
            dataset: ds,
            ood: None,
        });
    }
    let records = run_arms(&arms, jobs)?;
    let mut outcomes = Vec::new();
    for (i, &seed) in seeds.iter().enumerate() {
        let cs = &records[2 * i];
        let cr = &records[2 * i + 1];
        outcomes.push(efficiency_outcome(seed, base.steps, cs, cr)?);
    }
    let crossed = outcomes
        .iter()
        .filter(|o| o.crossover_fraction.map_or(false, |f| f <= 0.5))
        .count();
    let dominated = outcomes.iter().filter(|o| o.silhouette_dominates).count();
    let findings = json!({
        "per_seed": outcomes,
        "seeds_with_crossover_at_half": crossed,
        "seeds_with_silhouette_dominance": dominated,
    });
    Ok(ExperimentReport {
        experiment: "efficiency".to_string(),
        seeds: seeds.to_vec(),
        aggregates: aggregate(&records),
        arms: records,
        findings,
    })
}

fn efficiency_outcome(
    seed: u64,
    steps: usize,
    cs: &ArmRecord,
    cr: &ArmRecord,
) -> Result<EfficiencySeedOutcome> {
    let cs_rows = checkpoint_rows(&cs.metrics.rows);
    let cr_rows = checkpoint_rows(&cr.metrics.rows);
    let cs_final = cs_rows.last().ok_or_else(|| Error::Data("empty cs arm".into()))?.acc_ema;
    let cr_final = cr_rows.last().ok_or_else(|| Error::Data("empty cr arm".into()))?.acc_ema;
    let crossover_step = cr_rows.iter().find(|r| r.acc_ema >= cs_final).map(|r| r.step);
    let crossover_fraction = crossover_step.map(|s| s as f64 / steps.max(1) as f64);
    let tenth = steps as f64 * 0.1;
    let silhouette_dominates = cs_rows.iter().zip(cr_rows).all(|(a, b)| {
        debug_assert_eq!(a.step, b.step);
        (a.step as f64) <= tenth || b.silhouette >= a.silhouette
    });
    Ok(EfficiencySeedOutcome {
        seed,
        cs_final_acc_ema: cs_final,
        cr_final_acc_ema: cr_final,
        crossover_step,
        crossover_fraction,
        silhouette_dominates,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OodPreset {
    Far,
    Near,
}

impl OodPreset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "far" => Ok(OodPreset::Far),
            "near" => Ok(OodPreset::Near),
            other => Err(Error::Config(format!("unknown OOD preset `{other}`"))),
        }
    }

    pub fn build(&self, spec: &DatasetSpec, count: usize, seed: u64) -> OodSpec {
        match self {
            OodPreset::Far => OodSpec::far(spec, count, seed),
            OodPreset::Near => OodSpec::near(spec, count, seed),
        }
    }
}

/// Open-set robustness: contaminate the unlabeled pool with each OOD count
/// (which must start at 0 and ascend) and compare final EMA accuracy
/// degradation of cs-only vs cs+cr.
pub fn run_openset_experiment(
    base: &TrainConfig,
    data: &DatasetSpec,
    preset: OodPreset,
    ood_counts: &[usize],
    seeds: &[u64],
    jobs: usize,
) -> Result<ExperimentReport> {
    if ood_counts.is_empty() || ood_counts[0] != 0 || ood_counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "ood counts must be sorted ascending and start at 0".into(),
        ));
    }
    let modes = [LossMode::CsOnly, LossMode::CsCr];
    let mut arms = Vec::new();
    for &seed in seeds {
        for &count in ood_counts {
            let (cfg, ds) = with_seed(base, data, seed);
            let ood = (count > 0).then(|| preset.build(&ds, count, seed ^ 0x00D));
            for mode in modes {
                arms.push(ArmSpec {
                    name: format!("{}-ood{count}-seed{seed}", mode.as_str()),
                    config: TrainConfig { loss_mode: mode, ..cfg.clone() },
                    dataset: ds.clone(),
                    ood: ood.clone(),
                });
            }
        }
    }
    let records = run_arms(&arms, jobs)?;

    // accuracy curves per (seed, mode) over counts
    let mut per_seed = Vec::new();
    let per_count = ood_counts.len();
    for (sidx, &seed) in seeds.iter().enumerate() {
        let mut curves: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (cidx, _) in ood_counts.iter().enumerate() {
            for (midx, mode) in modes.iter().enumerate() {
                let arm = &records[sidx * per_count * 2 + cidx * 2 + midx];
                let acc = arm
                    .metrics
                    .last()
                    .ok_or_else(|| Error::Data("empty arm".into()))?
                    .acc_ema;
                curves.entry(mode.as_str()).or_default().push(acc);
            }
        }
        let degradation = |c: &Vec<f64>| c[0] - c[c.len() - 1];
        let cs = &curves["cs-only"];
        let cr = &curves["cs+cr"];
        per_seed.push(json!({
            "seed": seed,
            "cs_only_acc": cs,
            "cs_cr_acc": cr,
            "cs_only_degradation": degradation(cs),
            "cs_cr_degradation": degradation(cr),
            "cr_degrades_no_more": degradation(cr) <= degradation(cs),
        }));
    }
    let robust =
        per_seed.iter().filter(|s| s["cr_degrades_no_more"].as_bool().unwrap_or(false)).count();
    let findings = json!({
        "preset": match preset { OodPreset::Far => "far", OodPreset::Near => "near" },
        "ood_counts": ood_counts,
        "per_seed": per_seed,
        "seeds_where_cr_degrades_no_more": robust,
    });
    Ok(ExperimentReport {
        experiment: "openset".to_string(),
        seeds: seeds.to_vec(),
        aggregates: aggregate(&records),
        arms: records,
        findings,
    })
}

/// Sweepable hyperparameter axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationAxis {
    LambdaCr,
    LambdaCs,
    Mu,
    Delta,
    DeltaPrime,
    Views,
    LossMode,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lambda-cr" => Ok(AblationAxis::LambdaCr),
            "lambda-cs" => Ok(AblationAxis::LambdaCs),
            "mu" => Ok(AblationAxis::Mu),
            "delta" => Ok(AblationAxis::Delta),
            "delta-prime" => Ok(AblationAxis::DeltaPrime),
            "views" => Ok(AblationAxis::Views),
            "loss-mode" => Ok(AblationAxis::LossMode),
            other => Err(Error::Config(format!("unknown ablation axis `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationAxis::LambdaCr => "lambda-cr",
            AblationAxis::LambdaCs => "lambda-cs",
            AblationAxis::Mu => "mu",
            AblationAxis::Delta => "delta",
            AblationAxis::DeltaPrime => "delta-prime",
            AblationAxis::Views => "views",
            AblationAxis::LossMode => "loss-mode",
        }
    }

    /// Apply one swept value to a config.
    pub fn apply(&self, cfg: &mut TrainConfig, value: &str) -> Result<()> {
        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::Config(format!("bad numeric value `{v}`")))
        };
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("bad integer value `{v}`")))
        };
        match self {
            AblationAxis::LambdaCr => cfg.lambda_cr = parse_f64(value)?,
            AblationAxis::LambdaCs => cfg.lambda_cs = parse_f64(value)?,
            AblationAxis::Mu => cfg.mu = parse_usize(value)?,
            AblationAxis::Delta => cfg.delta = parse_f64(value)?,
            AblationAxis::DeltaPrime => cfg.delta_prime = parse_f64(value)?,
            AblationAxis::Views => cfg.views = parse_usize(value)?,
            AblationAxis::LossMode => cfg.loss_mode = LossMode::parse(value)?,
        }
        Ok(())
    }
}

/// Final-accuracy table over one hyperparameter axis, per value per seed.
pub fn run_ablation_sweep(
    base: &TrainConfig,
    data: &DatasetSpec,
    axis: AblationAxis,
    values: &[String],
    seeds: &[u64],
    jobs: usize,
) -> Result<ExperimentReport> {
    if values.is_empty() {
        return Err(Error::Config("ablation sweep needs at least one value".into()));
    }
    let mut arms = Vec::new();
    for &seed in seeds {
        for value in values {
            let (mut cfg, ds) = with_seed(base, data, seed);
            axis.apply(&mut cfg, value)?;
            cfg.validate()?;
            arms.push(ArmSpec {
                name: format!("{}={value}-seed{seed}", axis.as_str()),
                config: cfg,
                dataset: ds,
                ood: None,
            });
        }
    }
    let records = run_arms(&arms, jobs)?;
    let mut table = Vec::new();
    for (sidx, &seed) in seeds.iter().enumerate() {
        for (vidx, value) in values.iter().enumerate() {
            let arm = &records[sidx * values.len() + vidx];
            let last = arm.metrics.last().ok_or_else(|| Error::Data("empty arm".into()))?;
            table.push(json!({
                "axis": axis.as_str(),
                "value": value,
                "seed": seed,
                "final_acc_ema": last.acc_ema,
                "final_acc_raw": last.acc_raw,
                "final_mask_cs": last.mask_cs,
                "final_mask_cr": last.mask_cr,
            }));
        }
    }
    Ok(ExperimentReport {
        experiment: format!("ablation-{}", axis.as_str()),
        seeds: seeds.to_vec(),
        aggregates: aggregate(&records),
        arms: records,
        findings: json!({ "table": table }),
    })
}
