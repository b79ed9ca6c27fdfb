//! Synthetic labeled/unlabeled dataset generation, weak/strong stochastic
//! augmentation for vector data, batch sampling with the unlabeled ratio and
//! per-sample view count, and OOD injection for open-set experiments.

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};

/// Gaussian-mixture dataset description. Every sample of class `k` is
/// `centers[k] + noise * N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub centers: Vec<Vec<f64>>,
    pub noise: f64,
    pub labels_per_class: usize,
    pub unlabeled_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl DatasetSpec {
    /// Default desk-scale task: class centers on scaled coordinate axes.
    pub fn synthetic_default(
        classes: usize,
        input_dim: usize,
        labels_per_class: usize,
        unlabeled_count: usize,
        test_count: usize,
        seed: u64,
    ) -> Self {
        DatasetSpec {
            classes,
            input_dim,
            centers: axis_centers(classes, input_dim, 3.0),
            noise: 1.0,
            labels_per_class,
            unlabeled_count,
            test_count,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.input_dim == 0 {
            return Err(Error::Config("dataset needs classes >= 1 and input_dim >= 1".into()));
        }
        if self.labels_per_class == 0 {
            return Err(Error::Config("labels_per_class must be >= 1".into()));
        }
        if self.centers.len() != self.classes {
            return Err(Error::Config(format!(
                "expected {} centers, got {}",
                self.classes,
                self.centers.len()
            )));
        }
        for c in &self.centers {
            if c.len() != self.input_dim {
                return Err(Error::Config("center dimension mismatch".into()));
            }
        }
        for i in 0..self.centers.len() {
            for j in (i + 1)..self.centers.len() {
                if self.centers[i] == self.centers[j] {
                    return Err(Error::Config(format!("centers {i} and {j} coincide")));
                }
            }
        }
        Ok(())
    }
}

/// Class centers at `radius` along coordinate axes, wrapping with sign flips
/// when there are more classes than dimensions.
pub fn axis_centers(classes: usize, input_dim: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|k| {
            let mut c = vec![0.0; input_dim];
            let axis = k % input_dim;
            let sign = if (k / input_dim) % 2 == 0 { 1.0 } else { -1.0 };
            c[axis] = sign * radius;
            c
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub x: Matrix,
    pub y: Vec<usize>,
}

/// Unlabeled pool. True labels and OOD flags are retained for diagnostics
/// only; OOD flag reads are counted so tests can prove the training path
/// never consults them.
#[derive(Debug)]
pub struct UnlabeledSet {
    pub x: Matrix,
    hidden_labels: Vec<i64>,
    ood: Vec<bool>,
    flag_reads: AtomicU64,
}

impl Clone for UnlabeledSet {
    fn clone(&self) -> Self {
        UnlabeledSet {
            x: self.x.clone(),
            hidden_labels: self.hidden_labels.clone(),
            ood: self.ood.clone(),
            flag_reads: AtomicU64::new(self.flag_reads.load(Ordering::Relaxed)),
        }
    }
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Audited OOD flag access.
    pub fn ood_flag(&self, idx: usize) -> bool {
        self.flag_reads.fetch_add(1, Ordering::Relaxed);
        self.ood[idx]
    }

    /// Audited hidden-label access (-1 for OOD samples).
    pub fn hidden_label(&self, idx: usize) -> i64 {
        self.flag_reads.fetch_add(1, Ordering::Relaxed);
        self.hidden_labels[idx]
    }

    /// How many times diagnostics fields were read.
    pub fn flag_reads(&self) -> u64 {
        self.flag_reads.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledSet,
    pub test: LabeledSet,
}

fn draw_sample(center: &[f64], noise: f64, rng: &mut RngState) -> Vec<f64> {
    center.iter().map(|&c| c + noise * rng.normal()).collect()
}

/// Generate the labeled / unlabeled / test splits. Labeled is stratified
/// (exactly `labels_per_class` per class); unlabeled and test are i.i.d.
/// draws from the uniform mixture. Deterministic given `spec.seed`; each
/// split uses its own substream so resizing one split leaves the others
/// bit-identical.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let master = RngState::new(spec.seed);

    let mut rng = master.fork(1);
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    for k in 0..spec.classes {
        for _ in 0..spec.labels_per_class {
            lx.push(draw_sample(&spec.centers[k], spec.noise, &mut rng));
            ly.push(k);
        }
    }

    let mut rng = master.fork(2);
    let mut ux = Vec::new();
    let mut ulabels = Vec::new();
    for _ in 0..spec.unlabeled_count {
        let k = rng.index(spec.classes);
        ux.push(draw_sample(&spec.centers[k], spec.noise, &mut rng));
        ulabels.push(k as i64);
    }

    let mut rng = master.fork(3);
    let mut tx = Vec::new();
    let mut ty = Vec::new();
    for _ in 0..spec.test_count {
        let k = rng.index(spec.classes);
        tx.push(draw_sample(&spec.centers[k], spec.noise, &mut rng));
        ty.push(k);
    }

    Ok(Dataset {
        spec: spec.clone(),
        labeled: LabeledSet { x: Matrix::from_rows(&lx)?, y: ly },
        unlabeled: UnlabeledSet {
            x: Matrix::from_rows(&ux)?,
            ood: vec![false; ulabels.len()],
            hidden_labels: ulabels,
            flag_reads: AtomicU64::new(0),
        },
        test: LabeledSet { x: Matrix::from_rows(&tx)?, y: ty },
    })
}

/// Augmentation strengths; weak perturbs mildly, strong adds larger noise
/// plus coordinate dropout and global scale jitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub sigma_weak: f64,
    pub sigma_strong: f64,
    pub p_drop: f64,
    pub scale_jitter: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams { sigma_weak: 0.05, sigma_strong: 0.35, p_drop: 0.05, scale_jitter: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentStrength {
    Weak,
    Strong,
}

/// Stochastic augmentation of one vector. Total function: never fails on
/// finite input and never produces non-finite values.
pub fn augment(
    x: &[f64],
    strength: AugmentStrength,
    params: &AugmentParams,
    rng: &mut RngState,
) -> Vec<f64> {
    match strength {
        AugmentStrength::Weak => {
            x.iter().map(|&v| v + params.sigma_weak * rng.normal()).collect()
        }
        AugmentStrength::Strong => {
            let scale = rng.uniform_in(1.0 - params.scale_jitter, 1.0 + params.scale_jitter);
            x.iter()
                .map(|&v| {
                    let noisy = v * scale + params.sigma_strong * rng.normal();
                    let drop = rng.uniform() < params.p_drop;
                    if drop {
                        0.0
                    } else {
                        noisy
                    }
                })
                .collect()
        }
    }
}

/// One training mini-batch: `B` labeled samples plus `mu * B` unlabeled
/// sources (clean, pre-augmentation).
#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub x: Matrix,
    pub y: Vec<usize>,
    /// Clean unlabeled sources, mu*B x D.
    pub u_clean: Matrix,
    /// Pool indices of the unlabeled sources.
    pub u_indices: Vec<usize>,
}

/// Augmented views of the unlabeled half of a batch: one weak view per
/// source (the pseudo-label input) and `m` strong views per source.
#[derive(Clone, Debug)]
pub struct AugmentedBatch {
    pub weak: Matrix,
    pub strong: Matrix,
    /// For each strong view, the index of its source in `0..mu*B`.
    pub source_of_view: Vec<usize>,
    pub views_per_source: usize,
}

/// Draw a batch with replacement and build its augmented views.
pub fn sample_batch(
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    batch_labeled: usize,
    mu: usize,
    views: usize,
    aug: &AugmentParams,
    rng: &mut RngState,
) -> Result<(SampleBatch, AugmentedBatch)> {
    if labeled.x.rows() == 0 || unlabeled.is_empty() {
        return Err(Error::Config("sample_batch: empty labeled or unlabeled pool".into()));
    }
    if batch_labeled == 0 || mu == 0 || views == 0 {
        return Err(Error::Config("sample_batch: B, mu, m must all be >= 1".into()));
    }
    let mut lx = Vec::with_capacity(batch_labeled);
    let mut ly = Vec::with_capacity(batch_labeled);
    for _ in 0..batch_labeled {
        let i = rng.index(labeled.x.rows());
        lx.push(labeled.x.row(i).to_vec());
        ly.push(labeled.y[i]);
    }
    let unlabeled_n = mu * batch_labeled;
    let mut u_clean = Vec::with_capacity(unlabeled_n);
    let mut u_indices = Vec::with_capacity(unlabeled_n);
    let mut weak = Vec::with_capacity(unlabeled_n);
    let mut strong = Vec::with_capacity(unlabeled_n * views);
    let mut source_of_view = Vec::with_capacity(unlabeled_n * views);
    for s in 0..unlabeled_n {
        let i = rng.index(unlabeled.len());
        let x = unlabeled.x.row(i);
        u_clean.push(x.to_vec());
        u_indices.push(i);
        weak.push(augment(x, AugmentStrength::Weak, aug, rng));
        for _ in 0..views {
            strong.push(augment(x, AugmentStrength::Strong, aug, rng));
            source_of_view.push(s);
        }
    }
    Ok((
        SampleBatch {
            x: Matrix::from_rows(&lx)?,
            y: ly,
            u_clean: Matrix::from_rows(&u_clean)?,
            u_indices,
        },
        AugmentedBatch {
            weak: Matrix::from_rows(&weak)?,
            strong: Matrix::from_rows(&strong)?,
            source_of_view,
            views_per_source: views,
        },
    ))
}

/// Out-of-distribution contamination of the unlabeled pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodSpec {
    pub count: usize,
    pub centers: Vec<Vec<f64>>,
    pub noise: f64,
    pub seed: u64,
}

impl OodSpec {
    /// Disjoint-support preset: one center on the all-negative diagonal, far
    /// (>= 5 within-class sigma) from every in-distribution center.
    pub fn far(spec: &DatasetSpec, count: usize, seed: u64) -> Self {
        let radius = spec
            .centers
            .iter()
            .map(|c| crate::numerics::norm2(c))
            .fold(0.0_f64, f64::max)
            .max(1.0);
        let shift = radius + 5.0 * spec.noise.max(0.2);
        let center = vec![-shift / (spec.input_dim as f64).sqrt(); spec.input_dim];
        OodSpec { count, centers: vec![center], noise: spec.noise, seed }
    }

    /// Partially overlapping preset: centers halfway between consecutive
    /// in-distribution centers.
    pub fn near(spec: &DatasetSpec, count: usize, seed: u64) -> Self {
        let k = spec.centers.len();
        let centers = (0..k)
            .map(|i| {
                let a = &spec.centers[i];
                let b = &spec.centers[(i + 1) % k];
                a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
            })
            .collect();
        OodSpec { count, centers, noise: spec.noise, seed }
    }
}

/// Return a new unlabeled pool with `ood.count` OOD samples mixed in and the
/// whole pool deterministically shuffled. Hidden flags are preserved.
pub fn inject_ood(unlabeled: &UnlabeledSet, ood: &OodSpec) -> Result<UnlabeledSet> {
    if ood.count > 0 && ood.centers.is_empty() {
        return Err(Error::Config("inject_ood: no OOD centers".into()));
    }
    let mut rng = RngState::new(ood.seed);
    let mut rows: Vec<(Vec<f64>, i64, bool)> = (0..unlabeled.len())
        .map(|i| (unlabeled.x.row(i).to_vec(), unlabeled.hidden_labels[i], unlabeled.ood[i]))
        .collect();
    for _ in 0..ood.count {
        let c = rng.index(ood.centers.len());
        rows.push((draw_sample(&ood.centers[c], ood.noise, &mut rng), -1, true));
    }
    rng.shuffle(&mut rows);
    let x: Vec<Vec<f64>> = rows.iter().map(|(x, _, _)| x.clone()).collect();
    Ok(UnlabeledSet {
        x: Matrix::from_rows(&x)?,
        hidden_labels: rows.iter().map(|&(_, l, _)| l).collect(),
        ood: rows.iter().map(|&(_, _, o)| o).collect(),
        flag_reads: AtomicU64::new(0),
    })
}

/// Write the dataset as CSV with header `x0..x{D-1},label,is_ood,split`.
/// Floats are printed in shortest round-trip form, so import reproduces the
/// exact bits.
pub fn export_csv<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    let d = dataset.spec.input_dim;
    let header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    writeln!(w, "{},label,is_ood,split", header.join(","))?;
    let mut write_row = |x: &[f64], label: i64, is_ood: bool, split: &str| -> Result<()> {
        let cells: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{},{},{},{}", cells.join(","), label, is_ood as u8, split)?;
        Ok(())
    };
    for i in 0..dataset.labeled.x.rows() {
        write_row(dataset.labeled.x.row(i), dataset.labeled.y[i] as i64, false, "labeled")?;
    }
    for i in 0..dataset.unlabeled.len() {
        write_row(
            dataset.unlabeled.x.row(i),
            dataset.unlabeled.hidden_labels[i],
            dataset.unlabeled.ood[i],
            "unlabeled",
        )?;
    }
    for i in 0..dataset.test.x.rows() {
        write_row(dataset.test.x.row(i), dataset.test.y[i] as i64, false, "test")?;
    }
    Ok(())
}

/// Read a dataset back from [`export_csv`] output. The spec metadata other
/// than dimensions is taken from `spec` (CSV stores only samples).
pub fn import_csv<R: BufRead>(spec: &DatasetSpec, r: R) -> Result<Dataset> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Data("empty csv".into()))??;
    let expected_cols = spec.input_dim + 3;
    if header.split(',').count() != expected_cols {
        return Err(Error::Data(format!(
            "csv header has {} columns, expected {expected_cols}",
            header.split(',').count()
        )));
    }
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    let mut ux = Vec::new();
    let mut ulabels = Vec::new();
    let mut uood = Vec::new();
    let mut tx = Vec::new();
    let mut ty = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != expected_cols {
            return Err(Error::Data(format!("csv row has {} columns", cells.len())));
        }
        let x: Vec<f64> = cells[..spec.input_dim]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|e| Error::Data(format!("bad float: {e}"))))
            .collect::<Result<_>>()?;
        let label: i64 =
            cells[spec.input_dim].parse().map_err(|e| Error::Data(format!("bad label: {e}")))?;
        let is_ood = cells[spec.input_dim + 1] == "1";
        match cells[spec.input_dim + 2] {
            "labeled" => {
                lx.push(x);
                ly.push(label as usize);
            }
            "unlabeled" => {
                ux.push(x);
                ulabels.push(label);
                uood.push(is_ood);
            }
            "test" => {
                tx.push(x);
                ty.push(label as usize);
            }
            other => return Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        labeled: LabeledSet { x: Matrix::from_rows(&lx)?, y: ly },
        unlabeled: UnlabeledSet {
            x: Matrix::from_rows(&ux)?,
            hidden_labels: ulabels,
            ood: uood,
            flag_reads: AtomicU64::new(0),
        },
        test: LabeledSet { x: Matrix::from_rows(&tx)?, y: ty },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec::synthetic_default(2, 3, 4, 50, 20, 7)
    }

    #[test]
    fn zero_noise_samples_sit_on_centers() {
        let mut spec = DatasetSpec::synthetic_default(2, 2, 2, 10, 5, 1);
        spec.centers = vec![vec![5.0, 0.0], vec![-5.0, 0.0]];
        spec.noise = 0.0;
        let ds = generate_dataset(&spec).unwrap();
        for (i, &label) in ds.labeled.y.iter().enumerate() {
            assert_eq!(ds.labeled.x.row(i), spec.centers[label].as_slice());
        }
        for i in 0..ds.unlabeled.len() {
            let l = ds.unlabeled.hidden_labels[i] as usize;
            assert_eq!(ds.unlabeled.x.row(i), spec.centers[l].as_slice());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a.labeled.x.data(), b.labeled.x.data());
        assert_eq!(a.unlabeled.x.data(), b.unlabeled.x.data());
        assert_eq!(a.test.x.data(), b.test.x.data());
    }

    #[test]
    fn labeled_split_is_stratified() {
        let spec = DatasetSpec::synthetic_default(4, 8, 3, 10, 10, 5);
        let ds = generate_dataset(&spec).unwrap();
        for k in 0..4 {
            assert_eq!(ds.labeled.y.iter().filter(|&&y| y == k).count(), 3);
        }
    }

    #[test]
    fn class_proportions_are_near_uniform() {
        let spec = DatasetSpec::synthetic_default(4, 4, 1, 10_000, 0, 13);
        let ds = generate_dataset(&spec).unwrap();
        // multinomial: per-class sd = sqrt(n p (1-p)) ~ 43.3
        let sd = (10_000.0_f64 * 0.25 * 0.75).sqrt();
        for k in 0..4 {
            let count = ds.unlabeled.hidden_labels.iter().filter(|&&l| l == k as i64).count();
            assert!((count as f64 - 2500.0).abs() < 3.0 * sd, "class {k}: {count}");
        }
    }

    #[test]
    fn validate_rejects_coincident_centers() {
        let mut spec = small_spec();
        spec.centers = vec![vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]];
        assert!(matches!(generate_dataset(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn augment_identity_when_disabled() {
        let params =
            AugmentParams { sigma_weak: 0.0, sigma_strong: 0.0, p_drop: 0.0, scale_jitter: 0.0 };
        let x = vec![1.0, -2.0, 3.0];
        let mut rng = RngState::new(0);
        assert_eq!(augment(&x, AugmentStrength::Weak, &params, &mut rng), x);
        assert_eq!(augment(&x, AugmentStrength::Strong, &params, &mut rng), x);
    }

    #[test]
    fn augment_full_dropout_zeroes_everything() {
        let params =
            AugmentParams { sigma_weak: 0.0, sigma_strong: 0.3, p_drop: 1.0, scale_jitter: 0.2 };
        let x = vec![1.0, -2.0, 3.0];
        let mut rng = RngState::new(0);
        assert_eq!(augment(&x, AugmentStrength::Strong, &params, &mut rng), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn augment_noise_std_matches_parameter() {
        let params =
            AugmentParams { sigma_weak: 0.0, sigma_strong: 0.5, p_drop: 0.0, scale_jitter: 0.0 };
        let mut rng = RngState::new(3);
        let mut values = Vec::new();
        for _ in 0..10_000 {
            values.extend(augment(&[0.0], AugmentStrength::Strong, &params, &mut rng));
        }
        let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
        let var: f64 =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
        let std = var.sqrt();
        assert!((std - 0.5).abs() < 0.015, "std {std}");
    }

    #[test]
    fn augment_output_is_finite() {
        let params = AugmentParams::default();
        let mut rng = RngState::new(9);
        for _ in 0..200 {
            let x: Vec<f64> = (0..5).map(|_| rng.normal() * 100.0).collect();
            let out = augment(&x, AugmentStrength::Strong, &params, &mut rng);
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn sample_batch_counts_follow_b_mu_m() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let mut rng = RngState::new(1);
        let (sb, ab) = sample_batch(
            &ds.labeled,
            &ds.unlabeled,
            4,
            7,
            2,
            &AugmentParams::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(sb.x.rows(), 4);
        assert_eq!(sb.u_clean.rows(), 28);
        assert_eq!(ab.weak.rows(), 28);
        assert_eq!(ab.strong.rows(), 56);
        // each source has exactly m views and the map round-trips
        for (v, &s) in ab.source_of_view.iter().enumerate() {
            assert!(s < 28);
            assert_eq!(s, v / 2);
        }
        for s in 0..28 {
            assert_eq!(ab.source_of_view.iter().filter(|&&x| x == s).count(), 2);
        }
    }

    #[test]
    fn sample_batch_single_view() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let mut rng = RngState::new(2);
        let (_, ab) = sample_batch(
            &ds.labeled,
            &ds.unlabeled,
            3,
            2,
            1,
            &AugmentParams::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(ab.strong.rows(), 6);
    }

    #[test]
    fn sample_batch_rejects_empty_pool() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let empty = LabeledSet { x: Matrix::zeros(0, 3), y: vec![] };
        let mut rng = RngState::new(0);
        assert!(matches!(
            sample_batch(&empty, &ds.unlabeled, 2, 2, 2, &AugmentParams::default(), &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn inject_ood_zero_count_preserves_pool() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let ood = OodSpec::far(&ds.spec, 0, 99);
        let out = inject_ood(&ds.unlabeled, &ood).unwrap();
        assert_eq!(out.len(), ds.unlabeled.len());
        // same multiset of samples (shuffled)
        let mut a: Vec<Vec<f64>> = (0..out.len()).map(|i| out.x.row(i).to_vec()).collect();
        let mut b: Vec<Vec<f64>> =
            (0..ds.unlabeled.len()).map(|i| ds.unlabeled.x.row(i).to_vec()).collect();
        a.sort_by(|p, q| p.partial_cmp(q).unwrap());
        b.sort_by(|p, q| p.partial_cmp(q).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn inject_ood_adds_count_and_flags() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let ood = OodSpec::far(&ds.spec, 17, 99);
        let out = inject_ood(&ds.unlabeled, &ood).unwrap();
        assert_eq!(out.len(), ds.unlabeled.len() + 17);
        let flagged = (0..out.len()).filter(|&i| out.ood_flag(i)).count();
        assert_eq!(flagged, 17);
        assert_eq!(out.flag_reads(), out.len() as u64);
    }

    #[test]
    fn far_preset_is_far_from_all_centers() {
        let spec = small_spec();
        let ood = OodSpec::far(&spec, 1, 0);
        for c in &spec.centers {
            let d: f64 = ood.centers[0]
                .iter()
                .zip(c)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(d >= 5.0 * spec.noise, "distance {d}");
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let ood = OodSpec::far(&ds.spec, 5, 3);
        let unlabeled = inject_ood(&ds.unlabeled, &ood).unwrap();
        let ds = Dataset { unlabeled, ..ds };
        let mut buf = Vec::new();
        export_csv(&ds, &mut buf).unwrap();
        let back = import_csv(&ds.spec, std::io::BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(back.labeled.x.data(), ds.labeled.x.data());
        assert_eq!(back.labeled.y, ds.labeled.y);
        assert_eq!(back.unlabeled.x.data(), ds.unlabeled.x.data());
        assert_eq!(back.unlabeled.hidden_labels, ds.unlabeled.hidden_labels);
        assert_eq!(back.unlabeled.ood, ds.unlabeled.ood);
        assert_eq!(back.test.x.data(), ds.test.x.data());
    }
}
