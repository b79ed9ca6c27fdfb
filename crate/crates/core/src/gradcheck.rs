//! Analytic-vs-numeric verification suite: every closed-form gradient and
//! every loss is checked against an independent oracle (central finite
//! differences, or naive double-loop recomputation) on batches of random
//! instances. Runnable from the CLI in seconds; the acceptance tests call
//! the same entry points.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{
    consistency_loss, contrastive_loss, cr_anchor_loss, grad_cr_exact, grad_cs_wrt_classweights,
    grad_cs_wrt_features, make_pseudo_labels, ntxent_loss, positive_sets, supervised_loss,
    PseudoLabelRecord,
};
use crate::model::{backward, forward, init_params, Activation, ModelParams, ModelSpec, ParamGrads};
use crate::numerics::{dot, relative_error, Matrix, RngState};

/// One verification line: worst error over all instances of one check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckLine {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckLine {
    fn new(name: &str, instances: usize, max_error: f64, tolerance: f64) -> Self {
        CheckLine {
            name: name.to_string(),
            instances,
            max_error,
            tolerance,
            pass: max_error <= tolerance,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checks: Vec<CheckLine>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

const TAUS: [f64; 3] = [1.0, 0.1, 0.01];

/// A random loss instance: small smooth model, a strong-view batch, and
/// frozen pseudo-labels with a mix of confident and unconfident sources.
pub struct RandomInstance {
    pub params: ModelParams,
    pub strong: Matrix,
    pub labeled: Matrix,
    pub labels: Vec<usize>,
    pub records: Vec<PseudoLabelRecord>,
    pub source_of_view: Vec<usize>,
    pub tau: f64,
}

/// Tanh activations: finite differences cannot certify 1e-6 relative error
/// across ReLU kinks, and the gradient contract is activation-independent.
pub fn random_instance(rng: &mut RngState, idx: usize) -> Result<RandomInstance> {
    let classes = 2 + rng.index(3); // K in 2..=4
    let spec = ModelSpec {
        input_dim: 3,
        hidden: vec![4],
        feature_dim: 2 + rng.index(3),
        classes,
        proj_hidden: 4,
        proj_dim: 2 + rng.index(7).min(6), // P <= 8
        activation: Activation::Tanh,
    };
    let params = init_params(&spec, rng)?;
    let sources = 2 + rng.index(5); // 2..=6
    let views = if sources <= 6 { 2 } else { 1 };
    let n = sources * views; // <= 12
    let strong =
        Matrix::from_vec(n, spec.input_dim, (0..n * spec.input_dim).map(|_| rng.normal()).collect())?;
    let source_of_view: Vec<usize> = (0..n).map(|v| v / views).collect();
    let labeled = Matrix::from_vec(
        2,
        spec.input_dim,
        (0..2 * spec.input_dim).map(|_| rng.normal()).collect(),
    )?;
    let labels: Vec<usize> = (0..2).map(|_| rng.index(classes)).collect();

    // random pseudo-label distributions; sharpen some so masks mix
    let mut source_logits = Matrix::zeros(sources, classes);
    for i in 0..sources {
        let sharp = if rng.uniform() < 0.6 { 6.0 } else { 0.5 };
        for v in source_logits.row_mut(i) {
            *v = rng.normal() * sharp;
        }
    }
    let records = make_pseudo_labels(&source_logits, 0.7, 0.7)?;
    Ok(RandomInstance {
        params,
        strong,
        labeled,
        labels,
        records,
        source_of_view,
        tau: TAUS[idx % TAUS.len()],
    })
}

/// Step for the extrapolated differences below. Large enough to stay clear
/// of subtractive cancellation; the extrapolation removes the O(h^2) term
/// that a plain central difference would suffer at this size.
pub const RICHARDSON_STEP: f64 = 1e-4;

const F64_EPS: f64 = 2.2e-16;

/// Temperature-scaled step: the loss curvature grows like 1/tau^2, so the
/// truncation term needs a smaller step at sharp temperatures.
fn fd_step(tau: f64) -> f64 {
    RICHARDSON_STEP * tau.sqrt()
}

/// Absolute noise bound of the difference oracle: each evaluation of `f`
/// carries ~eps*|f| roundoff and the extrapolation divides four of them by
/// 12h.
fn fd_noise(f_scale: f64, h: f64) -> f64 {
    2.0 * F64_EPS * f_scale / h
}

/// Compare one analytic/numeric entry pair. Where the oracle can certify a
/// 1e-6 relative error (entry magnitude well above its noise), report the
/// relative error; smaller reported entries must still agree within the
/// oracle's absolute resolution, and a violation surfaces as a relative
/// error that breaks the tolerance.
fn fd_entry_error(analytic: f64, numeric: f64, noise: f64, floor: f64) -> f64 {
    if analytic.abs() <= floor {
        return 0.0;
    }
    let certified_floor = (4.0e6 * noise).max(floor);
    if analytic.abs() > certified_floor {
        relative_error(analytic, numeric)
    } else {
        let budget = 16.0 * noise + 1e-6 * analytic.abs().max(numeric.abs());
        if (analytic - numeric).abs() > budget {
            relative_error(analytic, numeric)
        } else {
            0.0
        }
    }
}

fn fd_matrix_error(analytic: &Matrix, numeric: &Matrix, f_scale: f64, h: f64) -> f64 {
    let noise = fd_noise(f_scale, h);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| fd_entry_error(a, n, noise, 1e-8))
        .fold(0.0, f64::max)
}

fn fd_tensor_error(analytic: &ParamGrads, numeric: &ParamGrads, f_scale: f64, h: f64) -> f64 {
    let noise = fd_noise(f_scale, h);
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.tensors().iter().zip(numeric.tensors().iter()) {
        for (&av, &nv) in a.iter().zip(n.iter()) {
            worst = worst.max(fd_entry_error(av, nv, noise, 1e-8));
        }
    }
    worst
}

/// Extrapolated central differences (`(8 (f(x+h) - f(x-h)) - (f(x+2h) -
/// f(x-2h))) / 12h`, error O(h^4)) of a scalar function over every
/// parameter tensor of the model.
pub fn fd_param_grads<F>(params: &ModelParams, h: f64, mut f: F) -> Result<ParamGrads>
where
    F: FnMut(&ModelParams) -> Result<f64>,
{
    let mut scratch = params.clone();
    let mut grads = ParamGrads::zeros_like(params);
    let tensor_lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    for (t, &len) in tensor_lens.iter().enumerate() {
        for i in 0..len {
            let orig = params.tensors()[t][i];
            let mut eval_at = |delta: f64| -> Result<f64> {
                scratch.tensors_mut()[t][i] = orig + delta;
                f(&scratch)
            };
            let p1 = eval_at(h)?;
            let m1 = eval_at(-h)?;
            let p2 = eval_at(2.0 * h)?;
            let m2 = eval_at(-2.0 * h)?;
            scratch.tensors_mut()[t][i] = orig;
            grads.tensors_mut()[t][i] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        }
    }
    Ok(grads)
}

/// Extrapolated central differences over a matrix argument.
pub fn fd_matrix<F>(mut f: F, at: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    let mut point = at.clone();
    for idx in 0..at.data().len() {
        let orig = point.data()[idx];
        let mut eval_at = |delta: f64| -> Result<f64> {
            point.data_mut()[idx] = orig + delta;
            f(&point)
        };
        let p1 = eval_at(h)?;
        let m1 = eval_at(-h)?;
        let p2 = eval_at(2.0 * h)?;
        let m2 = eval_at(-2.0 * h)?;
        point.data_mut()[idx] = orig;
        grad.data_mut()[idx] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
    }
    Ok(grad)
}

/// Closed-form per-anchor gradients (exact main term + remainder) against
/// finite differences of the anchor loss over the raw embedding rows.
pub fn check_cr_exact(instances: usize, seed: u64) -> Result<CheckLine> {
    let mut rng = RngState::new(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let n = 3 + rng.index(10); // 3..=12 views
        let dim = 2 + rng.index(7); // 2..=8
        let tau = TAUS[done % TAUS.len()];
        // unit rows, matching the domain of the embeddings the loss sees
        let mut h = Matrix::zeros(n, dim);
        for i in 0..n {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            h.row_mut(i).copy_from_slice(&crate::numerics::l2_normalize(&v)?);
        }
        let anchor = rng.index(n);
        let positives: Vec<usize> =
            (0..n).filter(|&v| v != anchor && rng.uniform() < 0.5).collect();
        if positives.is_empty() {
            continue;
        }
        let exact = grad_cr_exact(&h, anchor, &positives, tau)?;
        let base = cr_anchor_loss(&h, anchor, &positives, tau)?;
        let step = fd_step(tau);
        let fd = fd_matrix(|m| cr_anchor_loss(m, anchor, &positives, tau), &h, step)?;
        let analytic = Matrix::from_rows(&exact.minus_grad)?.scaled(-1.0);
        // intermediates inside lse - sim/tau reach 1/tau even when r is tiny
        let f_scale = base.abs() + 1.0 + 1.0 / tau;
        worst = worst.max(fd_matrix_error(&analytic, &fd, f_scale, step));
        // decomposition must reassemble exactly
        for k in 0..dim {
            let sum = exact.main_term[k] + exact.remainder[k];
            worst = worst.max((sum - exact.minus_grad[anchor][k]).abs());
        }
        done += 1;
    }
    Ok(CheckLine::new("eq7-eq8 closed form vs finite differences", instances, worst, 1e-6))
}

/// Full-chain contrastive gradient (projection head, normalization, encoder)
/// against finite differences over every parameter.
pub fn check_cr_full_chain(instances: usize, seed: u64) -> Result<CheckLine> {
    let mut rng = RngState::new(seed);
    let mut worst: f64 = 0.0;
    for idx in 0..instances {
        let inst = random_instance(&mut rng, idx)?;
        let loss_of = |p: &ModelParams| -> Result<f64> {
            let cache = forward(p, &inst.strong)?;
            Ok(contrastive_loss(&cache.z, &inst.records, &inst.source_of_view, inst.tau)?.0)
        };
        let cache = forward(&inst.params, &inst.strong)?;
        let (base, grad_z) =
            contrastive_loss(&cache.z, &inst.records, &inst.source_of_view, inst.tau)?;
        let zero_logits = Matrix::zeros(cache.logits.rows(), cache.logits.cols());
        let analytic = backward(&inst.params, &cache, &zero_logits, &grad_z)?;
        let step = fd_step(inst.tau);
        let fd = fd_param_grads(&inst.params, step, loss_of)?;
        let f_scale = base.abs() + 1.0 + 1.0 / inst.tau;
        worst = worst.max(fd_tensor_error(&analytic, &fd, f_scale, step));
    }
    Ok(CheckLine::new("contrastive full-chain gradient vs finite differences", instances, worst, 1e-6))
}

/// The published per-class expression against naive term-by-term
/// accumulation: both sum `mask * h(v) (1 - p(i|v)) / |A|` over the views
/// pseudo-labeled `i`, computed through different code paths.
pub fn check_cs_classweights(instances: usize, seed: u64) -> Result<CheckLine> {
    let mut rng = RngState::new(seed);
    let mut worst: f64 = 0.0;
    for idx in 0..instances {
        let inst = random_instance(&mut rng, idx)?;
        let cache = forward(&inst.params, &inst.strong)?;
        let got = grad_cs_wrt_classweights(
            &cache.features,
            &cache.logits,
            &inst.records,
            &inst.source_of_view,
        )?;
        let n = inst.strong.rows();
        let hdim = cache.features.cols();
        let classes = cache.logits.cols();
        let mut expect = Matrix::zeros(hdim, classes);
        for v in 0..n {
            let rec = &inst.records[inst.source_of_view[v]];
            if !rec.mask_cs {
                continue;
            }
            let exps: Vec<f64> = cache.logits.row(v).iter().map(|&x| x.exp()).collect();
            let denom: f64 = exps.iter().sum();
            let p_i = exps[rec.q_hat] / denom;
            for hidx in 0..hdim {
                let add = cache.features.get(v, hidx) * (1.0 - p_i) / n as f64;
                expect.set(hidx, rec.q_hat, expect.get(hidx, rec.q_hat) + add);
            }
        }
        for (&a, &b) in got.data().iter().zip(expect.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(CheckLine::new("eq3 per-class closed form vs brute-force accumulation", instances, worst, 1e-12))
}

/// The per-view feature closed form against the chain rule through the
/// classifier.
pub fn check_cs_features(instances: usize, seed: u64) -> Result<CheckLine> {
    let mut rng = RngState::new(seed);
    let mut worst: f64 = 0.0;
    for idx in 0..instances {
        let inst = random_instance(&mut rng, idx)?;
        let cache = forward(&inst.params, &inst.strong)?;
        let minus =
            grad_cs_wrt_features(&cache.logits, &inst.records, &inst.source_of_view, &inst.params.classifier)?;
        let (_, grad_logits) =
            consistency_loss(&cache.logits, &inst.records, &inst.source_of_view)?;
        let chain = grad_logits.matmul_transposed(&inst.params.classifier)?;
        for (&a, &b) in minus.data().iter().zip(chain.data()) {
            worst = worst.max((a + b).abs());
        }
    }
    Ok(CheckLine::new("cs feature closed form vs chain rule", instances, worst, 1e-12))
}

/// Full-chain consistency gradient against finite differences over every
/// parameter.
pub fn check_cs_full_chain(instances: usize, seed: u64) -> Result<CheckLine> {
    let mut rng = RngState::new(seed);
    let mut worst: f64 = 0.0;
    for idx in 0..instances {
        let inst = random_instance(&mut rng, idx)?;
        let loss_of = |p: &ModelParams| -> Result<f64> {
            let cache = forward(p, &inst.strong)?;
            Ok(consistency_loss(&cache.logits, &inst.records, &inst.source_of_view)?.0)
        };
        let cache = forward(&inst.params, &inst.strong)?;
        let (base, grad_logits) =
            consistency_loss(&cache.logits, &inst.records, &inst.source_of_view)?;
        let zero_z = Matrix::zeros(cache.z.rows(), cache.z.cols());
        let analytic = backward(&inst.params, &cache, &grad_logits, &zero_z)?;
        let fd = fd_param_grads(&inst.params, RICHARDSON_STEP, loss_of)?;
        worst = worst.max(fd_tensor_error(&analytic, &fd, base.abs() + 1.0, RICHARDSON_STEP));
    }
    Ok(CheckLine::new("consistency full-chain gradient vs finite differences", instances, worst, 1e-6))
}

fn naive_softmax_ce(logits: &[f64], target: usize) -> f64 {
    let exps: Vec<f64> = logits.iter().map(|&x| x.exp()).collect();
    let denom: f64 = exps.iter().sum();
    -(exps[target] / denom).ln()
}

/// All four loss values against naive scalar / double-loop oracles.
pub fn check_loss_oracles(instances: usize, seed: u64) -> Result<Vec<CheckLine>> {
    let mut rng = RngState::new(seed);
    let mut worst_sup: f64 = 0.0;
    let mut worst_cs: f64 = 0.0;
    let mut worst_cr: f64 = 0.0;
    let mut worst_nt: f64 = 0.0;
    for idx in 0..instances {
        let inst = random_instance(&mut rng, idx)?;
        let cache = forward(&inst.params, &inst.strong)?;
        let n = inst.strong.rows();

        let labeled_cache = forward(&inst.params, &inst.labeled)?;
        let (sup, _) = supervised_loss(&labeled_cache.logits, &inst.labels)?;
        let mut expect = 0.0;
        for (i, &y) in inst.labels.iter().enumerate() {
            expect += naive_softmax_ce(labeled_cache.logits.row(i), y);
        }
        worst_sup = worst_sup.max((sup - expect / inst.labels.len() as f64).abs());

        let (cs, _) = consistency_loss(&cache.logits, &inst.records, &inst.source_of_view)?;
        let mut expect = 0.0;
        for v in 0..n {
            let rec = &inst.records[inst.source_of_view[v]];
            if rec.mask_cs {
                expect += naive_softmax_ce(cache.logits.row(v), rec.q_hat);
            }
        }
        worst_cs = worst_cs.max((cs - expect / n as f64).abs());

        // use a moderate tau for the naive oracle so plain exp stays finite
        let tau = if inst.tau < 0.01 { 0.1 } else { inst.tau };
        let (cr, _) = contrastive_loss(&cache.z, &inst.records, &inst.source_of_view, tau)?;
        let pos_sets = positive_sets(&inst.records, &inst.source_of_view);
        let mut expect = 0.0;
        for u in 0..n {
            let rec = &inst.records[inst.source_of_view[u]];
            if !rec.mask_cr || pos_sets[u].is_empty() {
                continue;
            }
            let mut denom = 0.0;
            for v in 0..n {
                if v != u {
                    denom += (dot(cache.z.row(u), cache.z.row(v)) / tau).exp();
                }
            }
            let mut r = 0.0;
            for &p in &pos_sets[u] {
                r += -((dot(cache.z.row(u), cache.z.row(p)) / tau).exp() / denom).ln();
            }
            expect += r / pos_sets[u].len() as f64;
        }
        worst_cr = worst_cr.max((cr - expect / n as f64).abs());

        if inst.source_of_view.iter().filter(|&&s| s == 0).count() == 2 {
            let (nt, _) = ntxent_loss(&cache.z, &inst.source_of_view, tau)?;
            let mut expect = 0.0;
            for u in 0..n {
                let sib = inst
                    .source_of_view
                    .iter()
                    .enumerate()
                    .find(|&(v, &s)| v != u && s == inst.source_of_view[u])
                    .map(|(v, _)| v)
                    .unwrap();
                let mut denom = 0.0;
                for v in 0..n {
                    if v != u {
                        denom += (dot(cache.z.row(u), cache.z.row(v)) / tau).exp();
                    }
                }
                expect += -((dot(cache.z.row(u), cache.z.row(sib)) / tau).exp() / denom).ln();
            }
            worst_nt = worst_nt.max((nt - expect / n as f64).abs());
        }
    }
    Ok(vec![
        CheckLine::new("supervised loss vs naive oracle", instances, worst_sup, 1e-10),
        CheckLine::new("consistency loss vs naive oracle", instances, worst_cs, 1e-10),
        CheckLine::new("contrastive loss vs naive double-loop oracle", instances, worst_cr, 1e-10),
        CheckLine::new("nt-xent loss vs naive double-loop oracle", instances, worst_nt, 1e-10),
    ])
}

/// The whole suite.
pub fn run_gradcheck(instances: usize, seed: u64) -> Result<GradCheckReport> {
    let mut checks = vec![
        check_cr_exact(instances, seed)?,
        check_cr_full_chain(instances, seed.wrapping_add(1))?,
        check_cs_classweights(instances, seed.wrapping_add(2))?,
        check_cs_features(instances, seed.wrapping_add(3))?,
        check_cs_full_chain(instances, seed.wrapping_add(4))?,
    ];
    checks.extend(check_loss_oracles(instances, seed.wrapping_add(5))?);
    Ok(GradCheckReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let report = run_gradcheck(8, 42).unwrap();
        for check in &report.checks {
            assert!(
                check.pass,
                "{} failed: max error {} > {}",
                check.name, check.max_error, check.tolerance
            );
        }
    }
}
