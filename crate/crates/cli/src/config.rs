//! Flat key=value configuration with flag overrides.
//!
//! Resolution order: built-in defaults, then the config file, then command
//! line flags, then the `CRLAB_SEED` environment variable as a seed of last
//! resort. Unknown file keys are hard errors so typos cannot silently fall
//! back to defaults.

use std::collections::BTreeMap;
use std::path::Path;

use clap::Args;
use crlab_core::data::{axis_centers, DatasetSpec};
use crlab_core::error::{Error, Result};
use crlab_core::losses::LossMode;
use crlab_core::model::Activation;
use crlab_core::trainer::{PseudoSource, TrainConfig};

/// Dataset knobs that expand into a [`DatasetSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct DataParams {
    pub classes: usize,
    pub input_dim: usize,
    pub noise: f64,
    pub labels_per_class: usize,
    pub unlabeled: usize,
    pub test_count: usize,
    pub center_radius: f64,
}

impl Default for DataParams {
    fn default() -> Self {
        DataParams {
            classes: 4,
            input_dim: 8,
            noise: 1.0,
            labels_per_class: 4,
            unlabeled: 2000,
            test_count: 1000,
            center_radius: 3.0,
        }
    }
}

/// Fully resolved configuration.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub train: TrainConfig,
    pub data: DataParams,
}

impl Resolved {
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            classes: self.data.classes,
            input_dim: self.data.input_dim,
            centers: axis_centers(self.data.classes, self.data.input_dim, self.data.center_radius),
            noise: self.data.noise,
            labels_per_class: self.data.labels_per_class,
            unlabeled_count: self.data.unlabeled,
            test_count: self.data.test_count,
            seed: self.train.seed,
        }
    }

    /// Canonical `key=value` echo of every setting, for hashing and the
    /// manifest.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let t = &self.train;
        let d = &self.data;
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("steps", t.steps.to_string());
        put("seed", t.seed.to_string());
        put("batch", t.batch_labeled.to_string());
        put("mu", t.mu.to_string());
        put("views", t.views.to_string());
        put("delta", t.delta.to_string());
        put("delta_prime", t.delta_prime.to_string());
        put("tau", t.tau.to_string());
        put("lambda_cs", t.lambda_cs.to_string());
        put("lambda_cr", t.lambda_cr.to_string());
        put("lr", t.lr.to_string());
        put("momentum", t.momentum.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("ema_momentum", t.ema_momentum.to_string());
        put("eval_interval", t.eval_interval.to_string());
        put("loss_mode", t.loss_mode.as_str().to_string());
        put("pseudo_source", t.pseudo_source.as_str().to_string());
        put("pseudo_from_ema", t.pseudo_from_ema.to_string());
        put("silhouette_sample", t.silhouette_sample.to_string());
        put(
            "hidden",
            t.model.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
        );
        put("feature_dim", t.model.feature_dim.to_string());
        put("proj_hidden", t.model.proj_hidden.to_string());
        put("proj_dim", t.model.proj_dim.to_string());
        put(
            "activation",
            match t.model.activation {
                Activation::Relu => "relu".to_string(),
                Activation::LeakyRelu(s) => format!("leaky:{s}"),
                Activation::Tanh => "tanh".to_string(),
                Activation::Identity => "identity".to_string(),
            },
        );
        put("sigma_weak", t.augment.sigma_weak.to_string());
        put("sigma_strong", t.augment.sigma_strong.to_string());
        put("p_drop", t.augment.p_drop.to_string());
        put("scale_jitter", t.augment.scale_jitter.to_string());
        put("classes", d.classes.to_string());
        put("input_dim", d.input_dim.to_string());
        put("noise", d.noise.to_string());
        put("labels_per_class", d.labels_per_class.to_string());
        put("unlabeled", d.unlabeled.to_string());
        put("test_count", d.test_count.to_string());
        put("center_radius", d.center_radius.to_string());
        map
    }
}

/// Flag-level overrides, shared by every subcommand. Flags beat file values.
#[derive(Args, Clone, Debug, Default)]
pub struct OverrideArgs {
    /// Total training steps
    #[arg(long)]
    pub steps: Option<usize>,
    /// Master seed (dataset and training)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Labeled batch size B
    #[arg(long)]
    pub batch: Option<usize>,
    /// Unlabeled-to-labeled ratio in a batch
    #[arg(long)]
    pub mu: Option<usize>,
    /// Strong views per unlabeled sample m
    #[arg(long)]
    pub views: Option<usize>,
    /// Consistency confidence threshold
    #[arg(long)]
    pub delta: Option<f64>,
    /// Contrastive confidence threshold
    #[arg(long = "delta-prime")]
    pub delta_prime: Option<f64>,
    /// Contrastive temperature
    #[arg(long)]
    pub tau: Option<f64>,
    /// Consistency loss weight
    #[arg(long = "lambda-cs")]
    pub lambda_cs: Option<f64>,
    /// Contrastive loss weight
    #[arg(long = "lambda-cr")]
    pub lambda_cr: Option<f64>,
    /// Initial learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Nesterov momentum
    #[arg(long)]
    pub momentum: Option<f64>,
    /// L2 weight decay
    #[arg(long = "weight-decay")]
    pub weight_decay: Option<f64>,
    /// EMA momentum
    #[arg(long = "ema-momentum")]
    pub ema_momentum: Option<f64>,
    /// Steps between metric checkpoints
    #[arg(long = "eval-interval")]
    pub eval_interval: Option<usize>,
    /// Loss mode: cs-only | cr-only | cs+cr | cs+ntxent
    #[arg(long = "loss-mode")]
    pub loss_mode: Option<String>,
    /// Pseudo-label source: weak | clean
    #[arg(long = "pseudo-source")]
    pub pseudo_source: Option<String>,
    /// Draw pseudo-labels from the EMA model
    #[arg(long = "pseudo-from-ema")]
    pub pseudo_from_ema: Option<bool>,
    /// Max views sampled for the silhouette score
    #[arg(long = "silhouette-sample")]
    pub silhouette_sample: Option<usize>,
    /// Encoder hidden widths, comma separated
    #[arg(long)]
    pub hidden: Option<String>,
    /// Penultimate feature dimension H
    #[arg(long = "feature-dim")]
    pub feature_dim: Option<usize>,
    /// Projection head hidden width
    #[arg(long = "proj-hidden")]
    pub proj_hidden: Option<usize>,
    /// Projection embedding dimension P
    #[arg(long = "proj-dim")]
    pub proj_dim: Option<usize>,
    /// Activation: relu | leaky:<slope> | tanh | identity
    #[arg(long)]
    pub activation: Option<String>,
    /// Weak augmentation noise scale
    #[arg(long = "sigma-weak")]
    pub sigma_weak: Option<f64>,
    /// Strong augmentation noise scale
    #[arg(long = "sigma-strong")]
    pub sigma_strong: Option<f64>,
    /// Strong augmentation coordinate dropout probability
    #[arg(long = "p-drop")]
    pub p_drop: Option<f64>,
    /// Strong augmentation global scale jitter
    #[arg(long = "scale-jitter")]
    pub scale_jitter: Option<f64>,
    /// Number of classes K
    #[arg(long)]
    pub classes: Option<usize>,
    /// Input dimension D
    #[arg(long = "input-dim")]
    pub input_dim: Option<usize>,
    /// Within-class noise scale
    #[arg(long)]
    pub noise: Option<f64>,
    /// Labeled samples per class
    #[arg(long = "labels-per-class")]
    pub labels_per_class: Option<usize>,
    /// Unlabeled pool size
    #[arg(long)]
    pub unlabeled: Option<usize>,
    /// Test set size
    #[arg(long = "test-count")]
    pub test_count: Option<usize>,
    /// Distance of class centers from the origin
    #[arg(long = "center-radius")]
    pub center_radius: Option<f64>,
}

fn parse_activation(s: &str) -> Result<Activation> {
    if let Some(slope) = s.strip_prefix("leaky:") {
        let slope: f64 =
            slope.parse().map_err(|_| Error::Config(format!("bad leaky slope `{slope}`")))?;
        return Ok(Activation::LeakyRelu(slope));
    }
    match s {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        "identity" => Ok(Activation::Identity),
        other => Err(Error::Config(format!("unknown activation `{other}`"))),
    }
}

fn parse_hidden(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad hidden width `{p}`")))
        })
        .collect()
}

struct Setter<'a> {
    train: &'a mut TrainConfig,
    data: &'a mut DataParams,
    seed_was_set: bool,
}

impl Setter<'_> {
    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        let t = &mut *self.train;
        let d = &mut *self.data;
        match key {
            "steps" => t.steps = num(key, value)?,
            "seed" => {
                t.seed = num(key, value)?;
                self.seed_was_set = true;
            }
            "batch" => t.batch_labeled = num(key, value)?,
            "mu" => t.mu = num(key, value)?,
            "views" => t.views = num(key, value)?,
            "delta" => t.delta = num(key, value)?,
            "delta_prime" => t.delta_prime = num(key, value)?,
            "tau" => t.tau = num(key, value)?,
            "lambda_cs" => t.lambda_cs = num(key, value)?,
            "lambda_cr" => t.lambda_cr = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "momentum" => t.momentum = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "ema_momentum" => t.ema_momentum = num(key, value)?,
            "eval_interval" => t.eval_interval = num(key, value)?,
            "loss_mode" => t.loss_mode = LossMode::parse(value)?,
            "pseudo_source" => t.pseudo_source = PseudoSource::parse(value)?,
            "pseudo_from_ema" => t.pseudo_from_ema = num(key, value)?,
            "silhouette_sample" => t.silhouette_sample = num(key, value)?,
            "hidden" => t.model.hidden = parse_hidden(value)?,
            "feature_dim" => t.model.feature_dim = num(key, value)?,
            "proj_hidden" => t.model.proj_hidden = num(key, value)?,
            "proj_dim" => t.model.proj_dim = num(key, value)?,
            "activation" => t.model.activation = parse_activation(value)?,
            "sigma_weak" => t.augment.sigma_weak = num(key, value)?,
            "sigma_strong" => t.augment.sigma_strong = num(key, value)?,
            "p_drop" => t.augment.p_drop = num(key, value)?,
            "scale_jitter" => t.augment.scale_jitter = num(key, value)?,
            "classes" => d.classes = num(key, value)?,
            "input_dim" => d.input_dim = num(key, value)?,
            "noise" => d.noise = num(key, value)?,
            "labels_per_class" => d.labels_per_class = num(key, value)?,
            "unlabeled" => d.unlabeled = num(key, value)?,
            "test_count" => d.test_count = num(key, value)?,
            "center_radius" => d.center_radius = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }
}

/// Parse a `key=value` config file body. `#` starts a comment.
fn apply_file(setter: &mut Setter<'_>, body: &str) -> Result<()> {
    for (lineno, raw) in body.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("config line {} is not key=value: `{raw}`", lineno + 1))
        })?;
        setter.apply(key.trim(), value.trim())?;
    }
    Ok(())
}

fn apply_flags(setter: &mut Setter<'_>, flags: &OverrideArgs) -> Result<()> {
    macro_rules! set {
        ($field:ident, $key:literal) => {
            if let Some(v) = &flags.$field {
                setter.apply($key, &v.to_string())?;
            }
        };
    }
    set!(steps, "steps");
    set!(seed, "seed");
    set!(batch, "batch");
    set!(mu, "mu");
    set!(views, "views");
    set!(delta, "delta");
    set!(delta_prime, "delta_prime");
    set!(tau, "tau");
    set!(lambda_cs, "lambda_cs");
    set!(lambda_cr, "lambda_cr");
    set!(lr, "lr");
    set!(momentum, "momentum");
    set!(weight_decay, "weight_decay");
    set!(ema_momentum, "ema_momentum");
    set!(eval_interval, "eval_interval");
    set!(loss_mode, "loss_mode");
    set!(pseudo_source, "pseudo_source");
    set!(pseudo_from_ema, "pseudo_from_ema");
    set!(silhouette_sample, "silhouette_sample");
    set!(hidden, "hidden");
    set!(feature_dim, "feature_dim");
    set!(proj_hidden, "proj_hidden");
    set!(proj_dim, "proj_dim");
    set!(activation, "activation");
    set!(sigma_weak, "sigma_weak");
    set!(sigma_strong, "sigma_strong");
    set!(p_drop, "p_drop");
    set!(scale_jitter, "scale_jitter");
    set!(classes, "classes");
    set!(input_dim, "input_dim");
    set!(noise, "noise");
    set!(labels_per_class, "labels_per_class");
    set!(unlabeled, "unlabeled");
    set!(test_count, "test_count");
    set!(center_radius, "center_radius");
    Ok(())
}

/// Resolve defaults -> file -> flags -> `CRLAB_SEED` fallback, keep model and
/// dataset dimensions consistent, and validate.
pub fn parse_config(file: Option<&Path>, flags: &OverrideArgs) -> Result<Resolved> {
    let mut train = TrainConfig::default();
    let mut data = DataParams::default();
    let mut setter = Setter { train: &mut train, data: &mut data, seed_was_set: false };
    if let Some(path) = file {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        apply_file(&mut setter, &body)?;
    }
    apply_flags(&mut setter, flags)?;
    if !setter.seed_was_set {
        if let Ok(env_seed) = std::env::var("CRLAB_SEED") {
            setter.apply("seed", env_seed.trim())?;
        }
    }
    // the model consumes the dataset geometry
    train.model.input_dim = data.input_dim;
    train.model.classes = data.classes;
    let resolved = Resolved { train, data };
    resolved.train.validate()?;
    resolved.dataset_spec().validate()?;
    Ok(resolved)
}
