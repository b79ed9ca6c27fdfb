//! Training objectives and their exact analytic gradients: supervised
//! cross-entropy, consistency regularization over confident pseudo-labels,
//! pseudo-label contrastive regularization over embeddings, and the
//! unsupervised NT-Xent ablation baseline.
//!
//! Pseudo-label distributions are frozen at creation (stop-gradient): no
//! gradient ever flows through the pseudo-labeling forward pass. The trainer
//! consumes only exact chain-rule gradients; the closed-form per-class and
//! per-anchor expressions exist as analysis operations and are verified
//! against the exact gradients, not used for training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{backward, ForwardCache, ModelParams, ParamGrads};
use crate::numerics::{log_sum_exp, softmax, Matrix};

/// Frozen pseudo-label for one unlabeled source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    /// Frozen class distribution of the pseudo-label source.
    pub q: Vec<f64>,
    /// Argmax class, ties broken by lowest index.
    pub q_hat: usize,
    /// `max q`.
    pub confidence: f64,
    /// `confidence > delta` (consistency anchor gate).
    pub mask_cs: bool,
    /// `confidence > delta_prime` (contrastive anchor gate).
    pub mask_cr: bool,
}

/// Freeze pseudo-labels from the pseudo-label-source logits. Masks use
/// strict inequality.
pub fn make_pseudo_labels(
    source_logits: &Matrix,
    delta: f64,
    delta_prime: f64,
) -> Result<Vec<PseudoLabelRecord>> {
    let mut out = Vec::with_capacity(source_logits.rows());
    for i in 0..source_logits.rows() {
        let q = softmax(source_logits.row(i))?;
        let mut q_hat = 0;
        for (k, &p) in q.iter().enumerate() {
            if p > q[q_hat] {
                q_hat = k;
            }
        }
        let confidence = q[q_hat];
        out.push(PseudoLabelRecord {
            q,
            q_hat,
            confidence,
            mask_cs: confidence > delta,
            mask_cr: confidence > delta_prime,
        });
    }
    Ok(out)
}

/// Mean cross-entropy over a labeled batch, with the gradient w.r.t. the
/// logits: `(softmax - onehot) / B`.
pub fn supervised_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let batch = logits.rows();
    if batch == 0 || labels.len() != batch {
        return Err(Error::Dimension(format!(
            "supervised_loss: {} logit rows vs {} labels",
            batch,
            labels.len()
        )));
    }
    let classes = logits.cols();
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(batch, classes);
    let inv = 1.0 / batch as f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Data(format!("label {label} out of range for K={classes}")));
        }
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        loss += lse - row[label];
        let p = softmax(row)?;
        let grow = grad.row_mut(i);
        for (k, &pk) in p.iter().enumerate() {
            grow[k] = (pk - if k == label { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok((loss * inv, grad))
}

/// Consistency regularization over strong views.
///
/// `R_CS = (1/|A|) sum_v mask_cs(src(v)) * H(q_hat, p(.|v))` where the
/// denominator is the full view count: masked-out views contribute zero to
/// the numerator but stay in the denominator, and their logit gradients are
/// exactly zero.
pub fn consistency_loss(
    strong_logits: &Matrix,
    records: &[PseudoLabelRecord],
    source_of_view: &[usize],
) -> Result<(f64, Matrix)> {
    let views = strong_logits.rows();
    if source_of_view.len() != views {
        return Err(Error::Dimension("consistency_loss: view/source map mismatch".into()));
    }
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(views, strong_logits.cols());
    if views == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / views as f64;
    for v in 0..views {
        let rec = &records[source_of_view[v]];
        if !rec.mask_cs {
            continue;
        }
        let row = strong_logits.row(v);
        let lse = log_sum_exp(row);
        loss += lse - row[rec.q_hat];
        let p = softmax(row)?;
        let grow = grad.row_mut(v);
        for (k, &pk) in p.iter().enumerate() {
            grow[k] = (pk - if k == rec.q_hat { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok((loss * inv, grad))
}

/// The published per-class closed form of the minus gradient of `R_CS` with
/// respect to class weight `w_i`:
/// `(1/|A|) sum_{v in Q_i} mask * h(v) (1 - p(i|v))`.
///
/// This is an analysis operation: it reproduces the per-class expression
/// verbatim, which excludes the cross-class terms that flow through other
/// logits. The trainer always uses the exact chain-rule gradient.
pub fn grad_cs_wrt_classweights(
    strong_features: &Matrix,
    strong_logits: &Matrix,
    records: &[PseudoLabelRecord],
    source_of_view: &[usize],
) -> Result<Matrix> {
    let views = strong_logits.rows();
    if strong_features.rows() != views || source_of_view.len() != views {
        return Err(Error::Dimension("grad_cs_wrt_classweights: shape mismatch".into()));
    }
    let classes = strong_logits.cols();
    let hidden = strong_features.cols();
    let mut out = Matrix::zeros(hidden, classes);
    if views == 0 {
        return Ok(out);
    }
    let inv = 1.0 / views as f64;
    for v in 0..views {
        let rec = &records[source_of_view[v]];
        if !rec.mask_cs {
            continue;
        }
        let i = rec.q_hat;
        let p = softmax(strong_logits.row(v))?;
        let coeff = (1.0 - p[i]) * inv;
        for (hidx, &hval) in strong_features.row(v).iter().enumerate() {
            *out.row_mut(hidx).get_mut(i).unwrap() += hval * coeff;
        }
    }
    Ok(out)
}

/// Exact minus gradient of `R_CS` w.r.t. each strong view's features:
/// `(1/|A|) mask * W (onehot(q_hat) - p)` per view. Zero rows for masked-out
/// views.
pub fn grad_cs_wrt_features(
    strong_logits: &Matrix,
    records: &[PseudoLabelRecord],
    source_of_view: &[usize],
    classifier: &Matrix,
) -> Result<Matrix> {
    let views = strong_logits.rows();
    if source_of_view.len() != views || classifier.cols() != strong_logits.cols() {
        return Err(Error::Dimension("grad_cs_wrt_features: shape mismatch".into()));
    }
    let hidden = classifier.rows();
    let mut out = Matrix::zeros(views, hidden);
    if views == 0 {
        return Ok(out);
    }
    let inv = 1.0 / views as f64;
    for v in 0..views {
        let rec = &records[source_of_view[v]];
        if !rec.mask_cs {
            continue;
        }
        let p = softmax(strong_logits.row(v))?;
        let row = out.row_mut(v);
        for (k, &pk) in p.iter().enumerate() {
            let coeff = ((if k == rec.q_hat { 1.0 } else { 0.0 }) - pk) * inv;
            for (hidx, o) in row.iter_mut().enumerate() {
                *o += classifier.get(hidx, k) * coeff;
            }
        }
    }
    Ok(out)
}

/// Pseudo-positive sets: for each view, the indices of all other views whose
/// source shares its pseudo-label. Membership is determined solely by
/// pseudo-label equality; sibling views of the same source are included.
pub fn positive_sets(records: &[PseudoLabelRecord], source_of_view: &[usize]) -> Vec<Vec<usize>> {
    let views = source_of_view.len();
    (0..views)
        .map(|v| {
            let label = records[source_of_view[v]].q_hat;
            (0..views)
                .filter(|&w| w != v && records[source_of_view[w]].q_hat == label)
                .collect()
        })
        .collect()
}

/// Per-anchor contrastive term (the inner loss of the regularizer):
/// `r(u) = (-1/|P|) sum_{p in P} log( exp(<z_u,z_p>/tau) / sum_{v != u} exp(<z_u,z_v>/tau) )`,
/// log-sum-exp stabilized.
pub fn cr_anchor_loss(z: &Matrix, anchor: usize, positives: &[usize], tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if positives.is_empty() {
        return Err(Error::Degenerate(format!("anchor {anchor} has an empty positive set")));
    }
    let views = z.rows();
    let mut sims = vec![f64::NEG_INFINITY; views];
    for v in 0..views {
        if v != anchor {
            sims[v] = crate::numerics::dot(z.row(anchor), z.row(v)) / tau;
        }
    }
    let lse = log_sum_exp(&sims);
    let mut acc = 0.0;
    for &p in positives {
        acc += lse - sims[p];
    }
    Ok(acc / positives.len() as f64)
}

/// Contrastive regularization over all strong views.
///
/// Anchors are gated by `mask_cr`, but positive sets and denominators range
/// over every view regardless of confidence. Anchors with an empty positive
/// set contribute zero while the `1/|A|` normalization keeps the full view
/// count. Returns the loss and its exact gradient w.r.t. the (given)
/// embedding rows.
pub fn contrastive_loss(
    z: &Matrix,
    records: &[PseudoLabelRecord],
    source_of_view: &[usize],
    tau: f64,
) -> Result<(f64, Matrix)> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let views = z.rows();
    if source_of_view.len() != views {
        return Err(Error::Dimension("contrastive_loss: view/source map mismatch".into()));
    }
    let dim = z.cols();
    let mut grad = Matrix::zeros(views, dim);
    if views == 0 {
        return Ok((0.0, grad));
    }
    let positives = positive_sets(records, source_of_view);
    let inv_views = 1.0 / views as f64;

    // pairwise similarities once, then per-anchor softmax rows
    let sims = z.matmul_transposed(z)?;
    // coefficients[u][v] = s[u,v] - [v in P(u)] / |P(u)| for active anchors;
    // the gradient is then (1/(tau |A|)) (C + C^T) Z.
    let mut coeffs = Matrix::zeros(views, views);
    let mut loss = 0.0;
    let mut row = vec![0.0_f64; views];
    for u in 0..views {
        if !records[source_of_view[u]].mask_cr || positives[u].is_empty() {
            continue;
        }
        let pos = &positives[u];
        let inv_p = 1.0 / pos.len() as f64;
        let mut max = f64::NEG_INFINITY;
        for v in 0..views {
            row[v] = if v == u { f64::NEG_INFINITY } else { sims.get(u, v) / tau };
            max = max.max(row[v]);
        }
        let mut denom = 0.0;
        let crow = coeffs.row_mut(u);
        for v in 0..views {
            let e = if v == u { 0.0 } else { (row[v] - max).exp() };
            crow[v] = e;
            denom += e;
        }
        let lse = max + denom.ln();
        let mut pos_sim = 0.0;
        for &p in pos {
            pos_sim += row[p];
        }
        loss += lse - pos_sim * inv_p;
        for c in crow.iter_mut() {
            *c /= denom;
        }
        for &p in pos {
            crow[p] -= inv_p;
        }
    }
    let scale = inv_views / tau;
    grad = coeffs.matmul(z)?;
    let transposed_part = coeffs.transposed_matmul(z)?;
    grad.add_scaled(&transposed_part, 1.0)?;
    grad.scale(scale);
    Ok((loss * inv_views, grad))
}

/// Exact closed-form minus gradients of one anchor's contrastive term under
/// the derivation's assumptions (identity projection `z = h`), plus the
/// decomposition into the published main term and the remainder
/// `R(u) = -(1/tau) sum_{n not in P} s[u,n] h(n)`.
#[derive(Clone, Debug)]
pub struct CrExactGrads {
    /// Minus gradient of `r(u)` w.r.t. every row of `h`; index `anchor`
    /// holds the anchor's own gradient.
    pub minus_grad: Vec<Vec<f64>>,
    /// `(1/tau) sum_p (1/|P| - s[u,p]) h(p)`.
    pub main_term: Vec<f64>,
    /// The dropped remainder; `main_term + remainder` equals the anchor row.
    pub remainder: Vec<f64>,
}

pub fn grad_cr_exact(
    h: &Matrix,
    anchor: usize,
    positives: &[usize],
    tau: f64,
) -> Result<CrExactGrads> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if positives.is_empty() {
        return Err(Error::Degenerate(format!("anchor {anchor} has an empty positive set")));
    }
    let views = h.rows();
    let dim = h.cols();
    let inv_p = 1.0 / positives.len() as f64;
    let mut sims = vec![f64::NEG_INFINITY; views];
    for v in 0..views {
        if v != anchor {
            sims[v] = crate::numerics::dot(h.row(anchor), h.row(v)) / tau;
        }
    }
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut scores = vec![0.0_f64; views];
    let mut denom = 0.0;
    for v in 0..views {
        scores[v] = if v == anchor { 0.0 } else { (sims[v] - max).exp() };
        denom += scores[v];
    }
    for s in &mut scores {
        *s /= denom;
    }
    let is_pos = {
        let mut flags = vec![false; views];
        for &p in positives {
            flags[p] = true;
        }
        flags
    };

    let mut main_term = vec![0.0; dim];
    let mut remainder = vec![0.0; dim];
    for v in 0..views {
        if v == anchor {
            continue;
        }
        if is_pos[v] {
            let w = (inv_p - scores[v]) / tau;
            for (m, &hv) in main_term.iter_mut().zip(h.row(v)) {
                *m += w * hv;
            }
        } else {
            let w = -scores[v] / tau;
            for (r, &hv) in remainder.iter_mut().zip(h.row(v)) {
                *r += w * hv;
            }
        }
    }
    let mut minus_grad = vec![vec![0.0; dim]; views];
    for (g, (m, r)) in minus_grad[anchor].iter_mut().zip(main_term.iter().zip(&remainder)) {
        *g = m + r;
    }
    for v in 0..views {
        if v == anchor {
            continue;
        }
        let w = if is_pos[v] { (inv_p - scores[v]) / tau } else { -scores[v] / tau };
        for (g, &hu) in minus_grad[v].iter_mut().zip(h.row(anchor)) {
            *g = w * hu;
        }
    }
    Ok(CrExactGrads { minus_grad, main_term, remainder })
}

/// Unsupervised NT-Xent baseline: the only positive of a view is the other
/// view of the same source; the denominator ranges over all other views.
/// Requires exactly two views per source.
pub fn ntxent_loss(z: &Matrix, source_of_view: &[usize], tau: f64) -> Result<(f64, Matrix)> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let views = z.rows();
    if source_of_view.len() != views {
        return Err(Error::Dimension("ntxent_loss: view/source map mismatch".into()));
    }
    let sources = source_of_view.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); sources];
    for (v, &s) in source_of_view.iter().enumerate() {
        members[s].push(v);
    }
    if members.iter().any(|m| m.len() != 2) {
        return Err(Error::Config("ntxent_loss requires exactly m=2 views per source".into()));
    }
    let mut sibling = vec![0usize; views];
    for m in &members {
        sibling[m[0]] = m[1];
        sibling[m[1]] = m[0];
    }

    let inv_views = 1.0 / views as f64;
    let sims = z.matmul_transposed(z)?;
    let mut coeffs = Matrix::zeros(views, views);
    let mut loss = 0.0;
    let mut row = vec![0.0_f64; views];
    for u in 0..views {
        let sib = sibling[u];
        let mut max = f64::NEG_INFINITY;
        for v in 0..views {
            row[v] = if v == u { f64::NEG_INFINITY } else { sims.get(u, v) / tau };
            max = max.max(row[v]);
        }
        let mut denom = 0.0;
        let crow = coeffs.row_mut(u);
        for v in 0..views {
            let e = if v == u { 0.0 } else { (row[v] - max).exp() };
            crow[v] = e;
            denom += e;
        }
        let lse = max + denom.ln();
        loss += lse - row[sib];
        for c in crow.iter_mut() {
            *c /= denom;
        }
        crow[sib] -= 1.0;
    }
    let scale = inv_views / tau;
    let mut grad = coeffs.matmul(z)?;
    let transposed_part = coeffs.transposed_matmul(z)?;
    grad.add_scaled(&transposed_part, 1.0)?;
    grad.scale(scale);
    Ok((loss * inv_views, grad))
}

/// Which regularizers participate in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    CsOnly,
    CrOnly,
    CsCr,
    CsNtxent,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cs-only" => Ok(LossMode::CsOnly),
            "cr-only" => Ok(LossMode::CrOnly),
            "cs+cr" => Ok(LossMode::CsCr),
            "cs+ntxent" => Ok(LossMode::CsNtxent),
            other => Err(Error::Config(format!(
                "unknown loss mode `{other}` (expected cs-only, cr-only, cs+cr, cs+ntxent)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::CsOnly => "cs-only",
            LossMode::CrOnly => "cr-only",
            LossMode::CsCr => "cs+cr",
            LossMode::CsNtxent => "cs+ntxent",
        }
    }
}

/// Loss weighting and temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_cs: f64,
    pub lambda_cr: f64,
    pub tau: f64,
    pub mode: LossMode,
}

/// The lambdas actually applied under a mode: `cs-only` zeroes the
/// contrastive weight, `cr-only` zeroes the consistency weight.
pub fn effective_lambdas(cfg: &LossConfig) -> (f64, f64) {
    match cfg.mode {
        LossMode::CsOnly => (cfg.lambda_cs, 0.0),
        LossMode::CrOnly => (0.0, cfg.lambda_cr),
        LossMode::CsCr | LossMode::CsNtxent => (cfg.lambda_cs, cfg.lambda_cr),
    }
}

/// Per-batch loss values and mask diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub consistency: f64,
    /// The active embedding regularizer: contrastive, or NT-Xent in
    /// `cs+ntxent` mode.
    pub contrastive: f64,
    pub total: f64,
    pub mask_ratio_cs: f64,
    pub mask_ratio_cr: f64,
}

pub fn mask_ratios(records: &[PseudoLabelRecord], source_of_view: &[usize]) -> (f64, f64) {
    if source_of_view.is_empty() {
        return (0.0, 0.0);
    }
    let n = source_of_view.len() as f64;
    let cs = source_of_view.iter().filter(|&&s| records[s].mask_cs).count() as f64;
    let cr = source_of_view.iter().filter(|&&s| records[s].mask_cr).count() as f64;
    (cs / n, cr / n)
}

/// Combined objective `L = L_sup + lambda_cs * R_CS + lambda_cr * R_EMB`
/// with exact chain-rule parameter gradients through [`backward`]. The
/// embedding term is contrastive regularization, or NT-Xent in
/// [`LossMode::CsNtxent`].
pub fn total_loss(
    params: &ModelParams,
    labeled_cache: &ForwardCache,
    labels: &[usize],
    strong_cache: &ForwardCache,
    source_of_view: &[usize],
    records: &[PseudoLabelRecord],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, ParamGrads)> {
    if cfg.lambda_cs < 0.0 || cfg.lambda_cr < 0.0 {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    let (l_cs, l_cr) = effective_lambdas(cfg);
    let (sup, grad_sup_logits) = supervised_loss(&labeled_cache.logits, labels)?;
    let (cs, mut grad_cs_logits) =
        consistency_loss(&strong_cache.logits, records, source_of_view)?;
    // a zero-weighted embedding term contributes exactly nothing; skip the
    // pairwise computation in cs-only mode
    let (emb, mut grad_z) = if l_cr == 0.0 {
        (0.0, Matrix::zeros(strong_cache.z.rows(), strong_cache.z.cols()))
    } else {
        match cfg.mode {
            LossMode::CsNtxent => ntxent_loss(&strong_cache.z, source_of_view, cfg.tau)?,
            _ => contrastive_loss(&strong_cache.z, records, source_of_view, cfg.tau)?,
        }
    };

    let total = sup + l_cs * cs + l_cr * emb;
    grad_cs_logits.scale(l_cs);
    grad_z.scale(l_cr);

    let zero_z_labeled = Matrix::zeros(labeled_cache.z.rows(), labeled_cache.z.cols());
    let mut grads = backward(params, labeled_cache, &grad_sup_logits, &zero_z_labeled)?;
    let unlabeled = backward(params, strong_cache, &grad_cs_logits, &grad_z)?;
    grads.add_assign(&unlabeled)?;

    let (mask_ratio_cs, mask_ratio_cr) = mask_ratios(records, source_of_view);
    Ok((
        LossBreakdown {
            supervised: sup,
            consistency: cs,
            contrastive: emb,
            total,
            mask_ratio_cs,
            mask_ratio_cr,
        },
        grads,
    ))
}
