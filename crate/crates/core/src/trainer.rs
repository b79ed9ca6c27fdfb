//! The optimization loop: SGD with Nesterov momentum, cosine learning-rate
//! decay, per-step total-loss gradient application, EMA maintenance, and
//! metric emission.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, AugmentParams, AugmentedBatch, Dataset, SampleBatch};
use crate::error::{Error, Result};
use crate::eval::{accuracy, silhouette};
use crate::losses::{
    effective_lambdas, make_pseudo_labels, total_loss, LossBreakdown, LossConfig, LossMode,
};
use crate::model::{
    checkpoint_to_json, forward, init_params, predict_logits, EmaShadow, ModelParams, ModelSpec,
    ParamGrads,
};
use crate::numerics::RngState;

/// Which input the pseudo-label forward pass sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PseudoSource {
    /// The weakly augmented view (one per source).
    Weak,
    /// The clean sample before any augmentation.
    Clean,
}

impl PseudoSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "weak" => Ok(PseudoSource::Weak),
            "clean" => Ok(PseudoSource::Clean),
            other => Err(Error::Config(format!(
                "unknown pseudo_source `{other}` (expected weak or clean)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PseudoSource::Weak => "weak",
            PseudoSource::Clean => "clean",
        }
    }
}

/// Full training configuration. Defaults follow the reference
/// hyperparameters: delta = delta' = 0.95, tau = 0.01, beta = 0.9, mu = 7,
/// EMA momentum 0.999, initial LR 0.03.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_labeled: usize,
    pub mu: usize,
    pub views: usize,
    pub delta: f64,
    pub delta_prime: f64,
    pub tau: f64,
    pub lambda_cs: f64,
    pub lambda_cr: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_momentum: f64,
    pub steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub pseudo_source: PseudoSource,
    pub pseudo_from_ema: bool,
    pub loss_mode: LossMode,
    pub model: ModelSpec,
    pub augment: AugmentParams,
    /// Max strong views sampled per checkpoint for the silhouette score.
    pub silhouette_sample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_labeled: 16,
            mu: 7,
            views: 2,
            delta: 0.95,
            delta_prime: 0.95,
            tau: 0.01,
            lambda_cs: 1.0,
            lambda_cr: 1.0,
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 5e-3,
            ema_momentum: 0.999,
            steps: 20_000,
            eval_interval: 500,
            seed: 1,
            pseudo_source: PseudoSource::Weak,
            pseudo_from_ema: false,
            loss_mode: LossMode::CsCr,
            model: ModelSpec::default(),
            augment: AugmentParams::default(),
            silhouette_sample: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_labeled == 0 || self.mu == 0 || self.views == 0 {
            return Err(Error::Config("B, mu, m must all be >= 1".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lambda_cs", self.lambda_cs),
            ("lambda_cr", self.lambda_cr),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        for (name, v) in [("delta", self.delta), ("delta_prime", self.delta_prime)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::Config("ema_momentum must be in [0,1)".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be >= 1".into()));
        }
        if self.loss_mode == LossMode::CsNtxent && self.views != 2 {
            return Err(Error::Config("cs+ntxent requires exactly m=2 views".into()));
        }
        self.model.validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_cs: self.lambda_cs,
            lambda_cr: self.lambda_cr,
            tau: self.tau,
            mode: self.loss_mode,
        }
    }
}

/// Cosine decay without restarts: `lr(s) = lr0 * cos(7 pi s / (16 S))`.
/// Monotone nonincreasing on `[0, S]`, `lr(0) = lr0`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("cosine_lr: total step count must be >= 1".into()));
    }
    if step > total {
        return Err(Error::Config(format!("cosine_lr: step {step} > total {total}")));
    }
    Ok(lr0 * (7.0 * std::f64::consts::PI * step as f64 / (16.0 * total as f64)).cos())
}

/// Momentum buffers, congruent with the parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub velocity: ParamGrads,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState { velocity: ParamGrads::zeros_like(params), step: 0 }
    }
}

/// One SGD step with Nesterov momentum:
/// `g <- grad + wd * p; v' = beta v + g; p' = p - lr (g + beta v')`.
pub fn sgd_nesterov_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut OptimizerState,
    lr: f64,
    beta: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut ptensors = params.tensors_mut();
    let gtensors = grads.tensors();
    let mut vtensors = state.velocity.tensors_mut();
    if ptensors.len() != gtensors.len() || ptensors.len() != vtensors.len() {
        return Err(Error::Dimension("optimizer tensor count mismatch".into()));
    }
    for ((p, g), v) in ptensors.iter_mut().zip(&gtensors).zip(vtensors.iter_mut()) {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(Error::Dimension("optimizer tensor shape mismatch".into()));
        }
        for ((pv, &gv), vv) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            let eff = gv + weight_decay * *pv;
            *vv = beta * *vv + eff;
            *pv -= lr * (eff + beta * *vv);
        }
    }
    state.step += 1;
    Ok(())
}

/// One full training step on a prepared batch: pseudo-labels under
/// stop-gradient, total loss, optimizer update, EMA update. Returns the loss
/// breakdown and the number of embedding rows whose norm needed clamping.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    ema: &mut EmaShadow,
    sample: &SampleBatch,
    views: &AugmentedBatch,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<(LossBreakdown, usize)> {
    let pseudo_inputs = match cfg.pseudo_source {
        PseudoSource::Weak => &views.weak,
        PseudoSource::Clean => &sample.u_clean,
    };
    let pseudo_params = if cfg.pseudo_from_ema { &ema.params } else { &*params };
    let pseudo_logits = predict_logits(pseudo_params, pseudo_inputs)?;
    let records = make_pseudo_labels(&pseudo_logits, cfg.delta, cfg.delta_prime)?;

    let labeled_cache = forward(params, &sample.x)?;
    let strong_cache = forward(params, &views.strong)?;
    let clamped = labeled_cache.clamped_rows + strong_cache.clamped_rows;
    let (breakdown, grads) = total_loss(
        params,
        &labeled_cache,
        &sample.y,
        &strong_cache,
        &views.source_of_view,
        &records,
        &cfg.loss_config(),
    )?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: opt.step + 1,
            diagnostic: serde_json::to_string(&breakdown).unwrap_or_default(),
        });
    }
    sgd_nesterov_step(params, &grads, opt, lr, cfg.momentum, cfg.weight_decay)?;
    ema.update(params)?;
    Ok((breakdown, clamped))
}

/// JSON has no NaN; sentinel values (degenerate silhouette, empty test set)
/// round-trip as null.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// One metrics checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_sup: f64,
    pub loss_cs: f64,
    pub loss_cr: f64,
    pub mask_cs: f64,
    pub mask_cr: f64,
    #[serde(with = "nan_as_null")]
    pub acc_raw: f64,
    #[serde(with = "nan_as_null")]
    pub acc_ema: f64,
    #[serde(with = "nan_as_null")]
    pub silhouette: f64,
}

pub const METRICS_HEADER: &str =
    "step,lr,loss_total,loss_sup,loss_cs,loss_cr,mask_cs,mask_cr,acc_raw,acc_ema,silhouette";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.lr,
                r.loss_total,
                r.loss_sup,
                r.loss_cs,
                r.loss_cr,
                r.mask_cs,
                r.mask_cr,
                r.acc_raw,
                r.acc_ema,
                r.silhouette
            );
        }
        out
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

const SALT_INIT: u64 = 0x11;
const SALT_TRAIN: u64 = 0x22;
const SALT_EVAL: u64 = 0x33;

/// Losses, mask ratios, accuracies, and silhouette on a deterministic
/// evaluation batch drawn from a dedicated substream keyed by `(seed, step)`,
/// so matched arms see identical evaluation data at identical checkpoints.
fn eval_checkpoint(
    step: usize,
    lr: f64,
    cfg: &TrainConfig,
    dataset: &Dataset,
    params: &ModelParams,
    ema: &EmaShadow,
) -> Result<MetricsRow> {
    let mut rng = RngState::new(cfg.seed).fork(SALT_EVAL).fork(step as u64);
    // widen the unlabeled side of the evaluation batch until the strong-view
    // count fills the silhouette sampling budget
    let eval_mu = cfg
        .mu
        .max(cfg.silhouette_sample.div_ceil(cfg.views * cfg.batch_labeled));
    let (sample, views) = sample_batch(
        &dataset.labeled,
        &dataset.unlabeled,
        cfg.batch_labeled,
        eval_mu,
        cfg.views,
        &cfg.augment,
        &mut rng,
    )?;
    let pseudo_inputs = match cfg.pseudo_source {
        PseudoSource::Weak => &views.weak,
        PseudoSource::Clean => &sample.u_clean,
    };
    let pseudo_params = if cfg.pseudo_from_ema { &ema.params } else { params };
    let pseudo_logits = predict_logits(pseudo_params, pseudo_inputs)?;
    let records = make_pseudo_labels(&pseudo_logits, cfg.delta, cfg.delta_prime)?;
    let strong_cache = forward(params, &views.strong)?;
    let labeled_logits = predict_logits(params, &sample.x)?;

    let (loss_sup, _) = crate::losses::supervised_loss(&labeled_logits, &sample.y)?;
    let (loss_cs, _) = crate::losses::consistency_loss(
        &strong_cache.logits,
        &records,
        &views.source_of_view,
    )?;
    let (loss_cr, _) = match cfg.loss_mode {
        LossMode::CsNtxent => {
            crate::losses::ntxent_loss(&strong_cache.z, &views.source_of_view, cfg.tau)?
        }
        _ => crate::losses::contrastive_loss(
            &strong_cache.z,
            &records,
            &views.source_of_view,
            cfg.tau,
        )?,
    };
    let (el_cs, el_cr) = effective_lambdas(&cfg.loss_config());
    let loss_total = loss_sup + el_cs * loss_cs + el_cr * loss_cr;
    let (mask_cs, mask_cr) = crate::losses::mask_ratios(&records, &views.source_of_view);

    let (acc_raw, acc_ema) = if dataset.test.x.rows() == 0 {
        (f64::NAN, f64::NAN)
    } else {
        (
            accuracy(&predict_logits(params, &dataset.test.x)?, &dataset.test.y)?,
            accuracy(&predict_logits(&ema.params, &dataset.test.x)?, &dataset.test.y)?,
        )
    };

    // silhouette of penultimate features of (at most silhouette_sample)
    // strong views, clustered by pseudo-label
    let n_views = strong_cache.features.rows();
    let mut idx: Vec<usize> = (0..n_views).collect();
    rng.shuffle(&mut idx);
    idx.truncate(cfg.silhouette_sample.min(n_views));
    let rows: Vec<Vec<f64>> = idx.iter().map(|&v| strong_cache.features.row(v).to_vec()).collect();
    let ids: Vec<usize> =
        idx.iter().map(|&v| records[views.source_of_view[v]].q_hat).collect();
    let sil = match crate::numerics::Matrix::from_rows(&rows)
        .and_then(|f| silhouette(&f, &ids))
    {
        Ok(v) => v,
        Err(Error::Degenerate(_)) => f64::NAN,
        Err(e) => return Err(e),
    };

    Ok(MetricsRow {
        step,
        lr,
        loss_total,
        loss_sup,
        loss_cs,
        loss_cr,
        mask_cs,
        mask_cr,
        acc_raw,
        acc_ema,
        silhouette: sil,
    })
}

/// Completed run: metrics plus the final raw and EMA parameters.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub metrics: MetricsTable,
    pub params: ModelParams,
    pub ema: EmaShadow,
    pub wall_ms: u128,
    pub norm_clamp_events: u64,
}

/// Execute `cfg.steps` training steps on `dataset`, evaluating every
/// `eval_interval` steps (plus an initial row at step 0 and a final row at
/// the last step). Fully deterministic given `(cfg, dataset)`.
pub fn run(cfg: &TrainConfig, dataset: &Dataset) -> Result<RunResult> {
    cfg.validate()?;
    if dataset.spec.input_dim != cfg.model.input_dim {
        return Err(Error::Dimension(format!(
            "dataset dimension {} does not match model input {}",
            dataset.spec.input_dim, cfg.model.input_dim
        )));
    }
    if dataset.spec.classes != cfg.model.classes {
        return Err(Error::Dimension(format!(
            "dataset classes {} do not match model classes {}",
            dataset.spec.classes, cfg.model.classes
        )));
    }
    let start = Instant::now();
    let master = RngState::new(cfg.seed);
    let mut init_rng = master.fork(SALT_INIT);
    let mut train_rng = master.fork(SALT_TRAIN);

    let mut params = init_params(&cfg.model, &mut init_rng)?;
    let mut ema = EmaShadow::new(&params, cfg.ema_momentum);
    let mut opt = OptimizerState::new(&params);
    let mut metrics = MetricsTable::default();
    let mut norm_clamp_events = 0u64;

    metrics.rows.push(eval_checkpoint(0, cfg.lr, cfg, dataset, &params, &ema)?);
    for step in 1..=cfg.steps {
        let lr = cosine_lr(step - 1, cfg.steps, cfg.lr)?;
        let (sample, views) = sample_batch(
            &dataset.labeled,
            &dataset.unlabeled,
            cfg.batch_labeled,
            cfg.mu,
            cfg.views,
            &cfg.augment,
            &mut train_rng,
        )?;
        let (_, clamped) = train_step(&mut params, &mut opt, &mut ema, &sample, &views, cfg, lr)?;
        norm_clamp_events += clamped as u64;
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            metrics.rows.push(eval_checkpoint(step, lr, cfg, dataset, &params, &ema)?);
        }
    }
    Ok(RunResult {
        metrics,
        params,
        ema,
        wall_ms: start.elapsed().as_millis(),
        norm_clamp_events,
    })
}

/// Run summary written next to the metrics CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: TrainConfig,
    pub dataset: crate::data::DatasetSpec,
    pub seed: u64,
    pub final_metrics: MetricsRow,
    pub wall_clock_ms: u128,
    pub norm_clamp_events: u64,
}

/// Write `metrics.csv`, `summary.json`, and the raw/EMA checkpoints under
/// `dir`. Returns the file names written.
pub fn write_run_outputs(
    dir: &Path,
    cfg: &TrainConfig,
    dataset_spec: &crate::data::DatasetSpec,
    result: &RunResult,
) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    std::fs::write(dir.join("metrics.csv"), result.metrics.to_csv())?;
    written.push("metrics.csv".to_string());
    let summary = RunSummary {
        config: cfg.clone(),
        dataset: dataset_spec.clone(),
        seed: cfg.seed,
        final_metrics: *result
            .metrics
            .last()
            .ok_or_else(|| Error::Data("empty metrics table".into()))?,
        wall_clock_ms: result.wall_ms,
        norm_clamp_events: result.norm_clamp_events,
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    written.push("summary.json".to_string());
    std::fs::write(dir.join("checkpoint_raw.json"), checkpoint_to_json(&result.params)?)?;
    written.push("checkpoint_raw.json".to_string());
    std::fs::write(dir.join("checkpoint_ema.json"), checkpoint_to_json(&result.ema.params)?)?;
    written.push("checkpoint_ema.json".to_string());
    Ok(written)
}
