//! The trainable function: MLP encoder producing penultimate features `h`,
//! a linear classifier (logits = h . W), and a 2-layer projection head whose
//! output rows are L2-normalized into embeddings `z`. An EMA shadow copy of
//! all parameters is maintained for evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm2, Matrix, RngState, NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Identity,
}


/// One dense layer: `out = act(x . weight + bias)`, weight stored `in x out`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut pre = x.matmul(&self.weight)?;
        for i in 0..pre.rows() {
            for (v, b) in pre.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        let mut out = pre.clone();
        // dispatch once, not per element
        match self.activation {
            Activation::Identity => {}
            Activation::Relu => {
                for v in out.data_mut() {
                    *v = v.max(0.0);
                }
            }
            Activation::LeakyRelu(slope) => {
                for v in out.data_mut() {
                    if *v < 0.0 {
                        *v *= slope;
                    }
                }
            }
            Activation::Tanh => {
                for v in out.data_mut() {
                    *v = v.tanh();
                }
            }
        }
        Ok((pre, out))
    }
}

/// Architecture description; all dimensions must be >= 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_dim: 8,
            hidden: vec![64, 64],
            feature_dim: 16,
            classes: 4,
            proj_hidden: 16,
            proj_dim: 8,
            activation: Activation::Relu,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.input_dim, self.feature_dim, self.classes, self.proj_hidden, self.proj_dim];
        if dims.iter().chain(self.hidden.iter()).any(|&d| d == 0) {
            return Err(Error::Config("model dimensions must all be >= 1".into()));
        }
        Ok(())
    }
}

/// All trainable tensors. The classifier has no bias, matching the
/// logits = W^T h formulation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub encoder: Vec<DenseLayer>,
    pub classifier: Matrix,
    pub proj: Vec<DenseLayer>,
}

/// Draw initial parameters: weights ~ N(0, 1/fan_in), biases zero.
pub fn init_params(spec: &ModelSpec, rng: &mut RngState) -> Result<ModelParams> {
    spec.validate()?;
    let mut draw = |rows: usize, cols: usize| -> Matrix {
        let std = 1.0 / (rows as f64).sqrt();
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = rng.normal() * std;
        }
        m
    };
    let mut encoder = Vec::new();
    let mut in_dim = spec.input_dim;
    for &width in spec.hidden.iter().chain(std::iter::once(&spec.feature_dim)) {
        encoder.push(DenseLayer {
            weight: draw(in_dim, width),
            bias: vec![0.0; width],
            activation: spec.activation,
        });
        in_dim = width;
    }
    let classifier = draw(spec.feature_dim, spec.classes);
    let proj = vec![
        DenseLayer {
            weight: draw(spec.feature_dim, spec.proj_hidden),
            bias: vec![0.0; spec.proj_hidden],
            activation: spec.activation,
        },
        DenseLayer {
            weight: draw(spec.proj_hidden, spec.proj_dim),
            bias: vec![0.0; spec.proj_dim],
            activation: Activation::Identity,
        },
    ];
    Ok(ModelParams { spec: spec.clone(), encoder, classifier, proj })
}

/// Cached activations from one forward pass, retained for backward.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub input: Matrix,
    /// (pre-activation, activation) per encoder layer.
    pub encoder: Vec<(Matrix, Matrix)>,
    /// Penultimate features, batch x H (alias of the last encoder output).
    pub features: Matrix,
    pub logits: Matrix,
    pub proj: Vec<(Matrix, Matrix)>,
    /// Row norms of the projection output before normalization, already
    /// clamped to [`NORM_EPS`].
    pub prenorm: Vec<f64>,
    /// Unit-norm embeddings, batch x P.
    pub z: Matrix,
    /// Rows whose projection output norm fell below the clamp threshold.
    pub clamped_rows: usize,
}

/// Full forward pass with cache.
pub fn forward(params: &ModelParams, inputs: &Matrix) -> Result<ForwardCache> {
    if inputs.cols() != params.spec.input_dim {
        return Err(Error::Dimension(format!(
            "forward: inputs have {} columns, model expects {}",
            inputs.cols(),
            params.spec.input_dim
        )));
    }
    let mut encoder = Vec::with_capacity(params.encoder.len());
    let mut cur = inputs.clone();
    for layer in &params.encoder {
        let (pre, out) = layer.forward(&cur)?;
        cur = out.clone();
        encoder.push((pre, out));
    }
    let features = cur;
    let logits = features.matmul(&params.classifier)?;

    let mut proj = Vec::with_capacity(2);
    let mut p = features.clone();
    for layer in &params.proj {
        let (pre, out) = layer.forward(&p)?;
        p = out.clone();
        proj.push((pre, out));
    }
    let mut z = p;
    let mut prenorm = Vec::with_capacity(z.rows());
    let mut clamped_rows = 0;
    for i in 0..z.rows() {
        let n = norm2(z.row(i));
        let n = if n < NORM_EPS {
            clamped_rows += 1;
            NORM_EPS
        } else {
            n
        };
        for v in z.row_mut(i) {
            *v /= n;
        }
        prenorm.push(n);
    }
    Ok(ForwardCache {
        input: inputs.clone(),
        encoder,
        features,
        logits,
        proj,
        prenorm,
        z,
        clamped_rows,
    })
}

/// Forward pass that keeps only the logits (pseudo-labeling, evaluation).
pub fn predict_logits(params: &ModelParams, inputs: &Matrix) -> Result<Matrix> {
    if inputs.cols() != params.spec.input_dim {
        return Err(Error::Dimension(format!(
            "predict_logits: inputs have {} columns, model expects {}",
            inputs.cols(),
            params.spec.input_dim
        )));
    }
    let mut cur = inputs.clone();
    for layer in &params.encoder {
        let (_, out) = layer.forward(&cur)?;
        cur = out;
    }
    cur.matmul(&params.classifier)
}

/// Gradients, shape-congruent with [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub encoder: Vec<(Matrix, Vec<f64>)>,
    pub classifier: Matrix,
    pub proj: Vec<(Matrix, Vec<f64>)>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let layer_zeros = |l: &DenseLayer| {
            (Matrix::zeros(l.weight.rows(), l.weight.cols()), vec![0.0; l.bias.len()])
        };
        ParamGrads {
            encoder: params.encoder.iter().map(layer_zeros).collect(),
            classifier: Matrix::zeros(params.classifier.rows(), params.classifier.cols()),
            proj: params.proj.iter().map(layer_zeros).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) -> Result<()> {
        for ((w, b), (ow, ob)) in self.encoder.iter_mut().zip(&other.encoder) {
            w.add_scaled(ow, 1.0)?;
            for (x, y) in b.iter_mut().zip(ob) {
                *x += y;
            }
        }
        self.classifier.add_scaled(&other.classifier, 1.0)?;
        for ((w, b), (ow, ob)) in self.proj.iter_mut().zip(&other.proj) {
            w.add_scaled(ow, 1.0)?;
            for (x, y) in b.iter_mut().zip(ob) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in &self.encoder {
            out.push(w.data());
            out.push(b);
        }
        out.push(self.classifier.data());
        for (w, b) in &self.proj {
            out.push(w.data());
            out.push(b);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, b) in &mut self.encoder {
            out.push(w.data_mut());
            out.push(b.as_mut_slice());
        }
        out.push(self.classifier.data_mut());
        for (w, b) in &mut self.proj {
            out.push(w.data_mut());
            out.push(b.as_mut_slice());
        }
        out
    }
}

impl ModelParams {
    /// Flat views of every tensor, in a fixed canonical order shared with
    /// [`ParamGrads`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.encoder {
            out.push(l.weight.data());
            out.push(&l.bias);
        }
        out.push(self.classifier.data());
        for l in &self.proj {
            out.push(l.weight.data());
            out.push(&l.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.encoder {
            out.push(l.weight.data_mut());
            out.push(l.bias.as_mut_slice());
        }
        out.push(self.classifier.data_mut());
        for l in &mut self.proj {
            out.push(l.weight.data_mut());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    /// Named tensors with shapes, in canonical order (checkpoint layout).
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((
                format!("encoder.{i}.weight"),
                vec![l.weight.rows(), l.weight.cols()],
                l.weight.data(),
            ));
            out.push((format!("encoder.{i}.bias"), vec![l.bias.len()], l.bias.as_slice()));
        }
        out.push((
            "classifier.weight".to_string(),
            vec![self.classifier.rows(), self.classifier.cols()],
            self.classifier.data(),
        ));
        for (i, l) in self.proj.iter().enumerate() {
            out.push((
                format!("proj.{i}.weight"),
                vec![l.weight.rows(), l.weight.cols()],
                l.weight.data(),
            ));
            out.push((format!("proj.{i}.bias"), vec![l.bias.len()], l.bias.as_slice()));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn backprop_dense(
    layer: &DenseLayer,
    input: &Matrix,
    pre: &Matrix,
    grad_out: &Matrix,
) -> Result<(Matrix, Vec<f64>, Matrix)> {
    // grad through the activation, dispatched once
    let mut grad_pre = grad_out.clone();
    match layer.activation {
        Activation::Identity => {}
        Activation::Relu => {
            for (g, p) in grad_pre.data_mut().iter_mut().zip(pre.data()) {
                if *p <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        Activation::LeakyRelu(slope) => {
            for (g, p) in grad_pre.data_mut().iter_mut().zip(pre.data()) {
                if *p <= 0.0 {
                    *g *= slope;
                }
            }
        }
        Activation::Tanh => {
            for (g, p) in grad_pre.data_mut().iter_mut().zip(pre.data()) {
                let t = p.tanh();
                *g *= 1.0 - t * t;
            }
        }
    }
    let grad_weight = input.transposed_matmul(&grad_pre)?;
    let grad_bias = grad_pre.column_sums();
    let grad_input = grad_pre.matmul_transposed(&layer.weight)?;
    Ok((grad_weight, grad_bias, grad_input))
}

/// Chain-rule backward pass: map upstream gradients on the logits and on the
/// normalized embeddings to gradients for every parameter tensor. Either
/// upstream gradient may be all-zero. Linear in `(grad_logits, grad_z)`.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    grad_logits: &Matrix,
    grad_z: &Matrix,
) -> Result<ParamGrads> {
    let batch = cache.features.rows();
    if grad_logits.rows() != batch
        || grad_logits.cols() != params.spec.classes
        || grad_z.rows() != batch
        || grad_z.cols() != params.spec.proj_dim
    {
        return Err(Error::Dimension("backward: upstream gradient shape mismatch".into()));
    }
    let mut grads = ParamGrads::zeros_like(params);

    // classifier: logits = features . W
    grads.classifier = cache.features.transposed_matmul(grad_logits)?;
    let mut grad_features = grad_logits.matmul_transposed(&params.classifier)?;

    // z = y / ||y|| row-wise: dL/dy = (g - (g.z) z) / ||y||
    let mut grad_y = grad_z.clone();
    for i in 0..batch {
        let gz = grad_z.row(i);
        let zi = cache.z.row(i);
        let g_dot_z: f64 = gz.iter().zip(zi).map(|(a, b)| a * b).sum();
        let inv_n = 1.0 / cache.prenorm[i];
        let row = grad_y.row_mut(i);
        for (k, v) in row.iter_mut().enumerate() {
            *v = (gz[k] - g_dot_z * zi[k]) * inv_n;
        }
    }

    // projection head, last layer first
    let proj_inputs: [&Matrix; 2] = [&cache.features, &cache.proj[0].1];
    let mut upstream = grad_y;
    for idx in (0..params.proj.len()).rev() {
        let (gw, gb, ginput) =
            backprop_dense(&params.proj[idx], proj_inputs[idx], &cache.proj[idx].0, &upstream)?;
        grads.proj[idx] = (gw, gb);
        upstream = ginput;
    }
    grad_features.add_scaled(&upstream, 1.0)?;

    // encoder, last layer first
    let mut upstream = grad_features;
    for idx in (0..params.encoder.len()).rev() {
        let input = if idx == 0 { &cache.input } else { &cache.encoder[idx - 1].1 };
        let (gw, gb, ginput) =
            backprop_dense(&params.encoder[idx], input, &cache.encoder[idx].0, &upstream)?;
        grads.encoder[idx] = (gw, gb);
        upstream = ginput;
    }
    Ok(grads)
}

/// Exponential moving average of the parameters, evaluation-only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmaShadow {
    pub params: ModelParams,
    pub momentum: f64,
}

impl EmaShadow {
    pub fn new(params: &ModelParams, momentum: f64) -> Self {
        EmaShadow { params: params.clone(), momentum }
    }

    /// `s' = m s + (1 - m) p` elementwise.
    pub fn update(&mut self, params: &ModelParams) -> Result<()> {
        let m = self.momentum;
        let live = params.tensors();
        let mut shadow = self.params.tensors_mut();
        if live.len() != shadow.len() {
            return Err(Error::Dimension("ema shapes diverged".into()));
        }
        for (s, p) in shadow.iter_mut().zip(&live) {
            if s.len() != p.len() {
                return Err(Error::Dimension("ema tensor shapes diverged".into()));
            }
            for (sv, pv) in s.iter_mut().zip(p.iter()) {
                *sv = m * *sv + (1.0 - m) * pv;
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_FORMAT: &str = "crlab-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    model: ModelSpec,
    tensors: Vec<NamedTensor>,
}

/// Serialize parameters as versioned JSON named tensors.
pub fn checkpoint_to_json(params: &ModelParams) -> Result<String> {
    let tensors = params
        .named_tensors()
        .into_iter()
        .map(|(name, shape, data)| NamedTensor { name, shape, data: data.to_vec() })
        .collect();
    let ckpt =
        Checkpoint { format: CHECKPOINT_FORMAT.to_string(), model: params.spec.clone(), tensors };
    Ok(serde_json::to_string(&ckpt)?)
}

/// Rebuild parameters from checkpoint JSON, validating header and shapes.
pub fn checkpoint_from_json(text: &str) -> Result<ModelParams> {
    let ckpt: Checkpoint = serde_json::from_str(text)?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::Data(format!("unsupported checkpoint format `{}`", ckpt.format)));
    }
    let mut rng = RngState::new(0);
    let mut params = init_params(&ckpt.model, &mut rng)?;
    for t in &ckpt.tensors {
        let (rows, cols) = match t.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (*n, 1),
            _ => return Err(Error::Data(format!("tensor {} has bad shape", t.name))),
        };
        if rows * cols != t.data.len() {
            return Err(Error::Data(format!("tensor {} data/shape mismatch", t.name)));
        }
        let dest: &mut [f64] = match t.name.as_str() {
            "classifier.weight" => params.classifier.data_mut(),
            name => {
                let (group, rest) = name.split_once('.').ok_or_else(|| {
                    Error::Data(format!("unknown tensor name `{name}`"))
                })?;
                let (idx, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Data(format!("unknown tensor name `{name}`")))?;
                let idx: usize =
                    idx.parse().map_err(|_| Error::Data(format!("bad index in `{name}`")))?;
                let layers = match group {
                    "encoder" => &mut params.encoder,
                    "proj" => &mut params.proj,
                    _ => return Err(Error::Data(format!("unknown tensor group `{group}`"))),
                };
                let layer = layers
                    .get_mut(idx)
                    .ok_or_else(|| Error::Data(format!("layer index out of range in `{name}`")))?;
                match field {
                    "weight" => layer.weight.data_mut(),
                    "bias" => layer.bias.as_mut_slice(),
                    _ => return Err(Error::Data(format!("unknown tensor field `{field}`"))),
                }
            }
        };
        if dest.len() != t.data.len() {
            return Err(Error::Data(format!("tensor {} does not fit the model spec", t.name)));
        }
        dest.copy_from_slice(&t.data);
    }
    Ok(params)
}
