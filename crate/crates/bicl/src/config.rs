//! Experiment configuration: flat dotted `key = value` text.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := '#' any*
//! entry   := key ws* '=' ws* value ws* ('#' any*)?
//! key     := [a-z0-9_]+ ('.' [a-z0-9_]+)*
//! ```
//!
//! Lists are comma separated. Every key has a default, unknown keys are an
//! error, and a later assignment (including a `--key=value` flag) wins.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use bicl_core::baselines::{EwcConfig, EwcMode, OnlineConfig, Optimizer};
use bicl_core::bilevel::{BiclHyperparams, InnerOptimizer};
use bicl_core::autodiff::SecondOrderMethod;
use bicl_core::losses::LossKind;
use bicl_core::models::SplitScheme;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("bad value {value:?} for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("override {0:?} is not of the form --key=value")]
    BadOverride(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Bicl,
    Online,
    Independent,
    Ewc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    Vae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskFamily {
    Rotation,
    Permutation,
    /// One class per task (generative streams).
    Class,
}

macro_rules! keyword_enum {
    ($ty:ty { $($variant:path => $text:literal),+ $(,)? }) => {
        impl $crate::config::Keyword for $ty {
            fn keyword(&self) -> &'static str {
                match self { $($variant => $text),+ }
            }
            fn parse_keyword(s: &str) -> Option<Self> {
                match s { $($text => Some($variant),)+ _ => None }
            }
            fn keywords() -> &'static [&'static str] {
                &[$($text),+]
            }
        }
    };
}

pub(crate) trait Keyword: Sized {
    fn keyword(&self) -> &'static str;
    fn parse_keyword(s: &str) -> Option<Self>;
    fn keywords() -> &'static [&'static str];
}

keyword_enum!(Method { Method::Bicl => "bicl", Method::Online => "online", Method::Independent => "independent", Method::Ewc => "ewc" });
keyword_enum!(ModelKind { ModelKind::Mlp => "mlp", ModelKind::Vae => "vae" });
keyword_enum!(TaskFamily { TaskFamily::Rotation => "rotation", TaskFamily::Permutation => "permutation", TaskFamily::Class => "class" });
keyword_enum!(SplitScheme { SplitScheme::HiddenAsHyper => "hidden", SplitScheme::OutputAsHyper => "output" });
keyword_enum!(LossKind { LossKind::XentMean => "xent_mean", LossKind::XentMax => "xent_max", LossKind::ElboNeg => "elbo" });
keyword_enum!(InnerOptimizer { InnerOptimizer::Sgd => "sgd", InnerOptimizer::AdamApprox => "adam" });
keyword_enum!(Optimizer { Optimizer::Sgd => "sgd", Optimizer::Adam => "adam" });
keyword_enum!(EwcMode { EwcMode::Sum => "sum", EwcMode::PerTask => "per_task" });

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

impl FromStr for Method {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        parse_kw("method", s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub model: ModelKind,
    /// Directory holding `<dataset>/` IDX files; `None` defers to the environment.
    pub data_root: Option<PathBuf>,
    pub dataset: String,
    pub task_family: TaskFamily,
    pub tasks: usize,
    pub samples_per_task: usize,
    pub test_samples: usize,
    pub split_ratio: f64,
    /// `None` picks the model's usual scheme.
    pub scheme: Option<SplitScheme>,
    pub memory_size: usize,
    pub memory_train_fraction: f64,
    pub continuum_batch: usize,
    pub mlp_hidden: Vec<usize>,
    pub vae_encoder_hidden: Vec<usize>,
    pub vae_latent: usize,
    pub vae_decoder_hidden: Vec<usize>,
    pub bicl: BiclHyperparams,
    pub outer_loss: LossKind,
    pub baseline: OnlineConfig,
    pub ewc_lambda: f64,
    pub ewc_mode: EwcMode,
    pub fisher_samples: usize,
    pub test_ll_samples: usize,
    pub seeds: Vec<u64>,
    pub grid_methods: Vec<Method>,
    pub grid_memories: Vec<usize>,
    pub output_dir: PathBuf,
    pub sample_grids: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::Bicl,
            model: ModelKind::Mlp,
            data_root: None,
            dataset: "mnist".into(),
            task_family: TaskFamily::Rotation,
            tasks: 10,
            samples_per_task: 1000,
            test_samples: 1000,
            split_ratio: 0.8,
            scheme: None,
            memory_size: 500,
            memory_train_fraction: 0.5,
            continuum_batch: 10,
            mlp_hidden: vec![100, 100],
            vae_encoder_hidden: vec![128],
            vae_latent: 8,
            vae_decoder_hidden: vec![128],
            bicl: BiclHyperparams::default(),
            outer_loss: LossKind::XentMax,
            baseline: OnlineConfig::default(),
            ewc_lambda: 10.0,
            ewc_mode: EwcMode::Sum,
            fisher_samples: 200,
            test_ll_samples: 500,
            seeds: vec![0],
            grid_methods: Vec::new(),
            grid_memories: Vec::new(),
            output_dir: PathBuf::from("runs"),
            sample_grids: false,
        }
    }
}

fn bad(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue { key: key.into(), value: value.into(), reason: reason.into() }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| bad(key, v, e.to_string()))
}

fn parse_kw<T: Keyword>(key: &str, v: &str) -> Result<T, ConfigError> {
    T::parse_keyword(v).ok_or_else(|| bad(key, v, format!("expected one of {}", T::keywords().join(", "))))
}

fn parse_list<T, F>(key: &str, v: &str, item: F) -> Result<Vec<T>, ConfigError>
where
    F: Fn(&str, &str) -> Result<T, ConfigError>,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| item(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "expected true or false")),
    }
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Keys that name the run itself rather than what it computes.
const NON_SEMANTIC: &[&str] = &["seeds", "output.dir", "data.root", "grid.methods", "grid.memories", "output.sample_grids"];

impl ExperimentConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            let k = k.trim();
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.') {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
            }
            self.set(k, v.trim())?;
        }
        Ok(())
    }

    /// Applies `--key=value` flags.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, flags: &[S]) -> Result<(), ConfigError> {
        for f in flags {
            let f = f.as_ref();
            let body = f.strip_prefix("--").ok_or_else(|| ConfigError::BadOverride(f.into()))?;
            let (k, v) = body.split_once('=').ok_or_else(|| ConfigError::BadOverride(f.into()))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let b = &mut self.bicl;
        match key {
            "method" => self.method = parse_kw(key, v)?,
            "model" => self.model = parse_kw(key, v)?,
            "data.root" => self.data_root = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "data.name" => {
                if v.is_empty() || v.contains(['/', '\\']) {
                    return Err(bad(key, v, "dataset name must be a plain directory name"));
                }
                self.dataset = v.into()
            }
            "task.kind" => self.task_family = parse_kw(key, v)?,
            "task.count" => self.tasks = parse_num(key, v)?,
            "task.samples" => self.samples_per_task = parse_num(key, v)?,
            "task.test_samples" => self.test_samples = parse_num(key, v)?,
            "split.ratio" => self.split_ratio = parse_num(key, v)?,
            "split.scheme" => self.scheme = if v == "auto" { None } else { Some(parse_kw(key, v)?) },
            "memory.size" => self.memory_size = parse_num(key, v)?,
            "memory.train_fraction" => self.memory_train_fraction = parse_num(key, v)?,
            "continuum.batch_size" => self.continuum_batch = parse_num(key, v)?,
            "mlp.hidden" => self.mlp_hidden = parse_list(key, v, parse_num)?,
            "vae.encoder_hidden" => self.vae_encoder_hidden = parse_list(key, v, parse_num)?,
            "vae.latent" => self.vae_latent = parse_num(key, v)?,
            "vae.decoder_hidden" => self.vae_decoder_hidden = parse_list(key, v, parse_num)?,
            "vae.test_ll_samples" => self.test_ll_samples = parse_num(key, v)?,
            "bicl.eta_inner" => b.eta_inner = parse_num(key, v)?,
            "bicl.eta_hyper" => b.eta_hyper = parse_num(key, v)?,
            "bicl.beta_lambda" => b.beta_lambda = parse_num(key, v)?,
            "bicl.beta_w" => b.beta_w = parse_num(key, v)?,
            "bicl.beta_lambda_task" => b.beta_lambda_task = parse_num(key, v)?,
            "bicl.beta_w_task" => b.beta_w_task = parse_num(key, v)?,
            "bicl.inner_steps" => b.inner_steps = parse_num(key, v)?,
            "bicl.meta_batches" => b.meta_batches = parse_num(key, v)?,
            "bicl.batch_size" => b.batch_size = parse_num(key, v)?,
            "bicl.val_batch_size" => b.val_batch_size = parse_num(key, v)?,
            "bicl.optimizer" => b.optimizer = parse_kw(key, v)?,
            "bicl.adam_beta1" => b.adam.beta1 = parse_num(key, v)?,
            "bicl.adam_beta2" => b.adam.beta2 = parse_num(key, v)?,
            "bicl.adam_eps" => b.adam.eps = parse_num(key, v)?,
            "bicl.second_order" => {
                b.second_order = match v {
                    "exact" => SecondOrderMethod::Exact,
                    _ => match v.strip_prefix("difference:") {
                        Some(eps) => SecondOrderMethod::GradientDifference { eps: parse_num(key, eps)? },
                        None => return Err(bad(key, v, "expected exact or difference:<eps>")),
                    },
                }
            }
            "bicl.outer_loss" => self.outer_loss = parse_kw(key, v)?,
            "baseline.lr" => self.baseline.lr = parse_num(key, v)?,
            "baseline.optimizer" => self.baseline.optimizer = parse_kw(key, v)?,
            "ewc.lambda" => self.ewc_lambda = parse_num(key, v)?,
            "ewc.mode" => self.ewc_mode = parse_kw(key, v)?,
            "ewc.fisher_samples" => self.fisher_samples = parse_num(key, v)?,
            "seeds" => self.seeds = parse_list(key, v, parse_num)?,
            "grid.methods" => self.grid_methods = parse_list(key, v, parse_kw)?,
            "grid.memories" => self.grid_memories = parse_list(key, v, parse_num)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            "output.sample_grids" => self.sample_grids = parse_bool(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let b = &self.bicl;
        let second_order = match b.second_order {
            SecondOrderMethod::Exact => "exact".to_string(),
            SecondOrderMethod::GradientDifference { eps } => format!("difference:{eps:?}"),
        };
        vec![
            ("method", self.method.keyword().into()),
            ("model", self.model.keyword().into()),
            ("data.root", self.data_root.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("data.name", self.dataset.clone()),
            ("task.kind", self.task_family.keyword().into()),
            ("task.count", self.tasks.to_string()),
            ("task.samples", self.samples_per_task.to_string()),
            ("task.test_samples", self.test_samples.to_string()),
            ("split.ratio", format!("{:?}", self.split_ratio)),
            ("split.scheme", self.scheme.map_or("auto", |s| s.keyword()).into()),
            ("memory.size", self.memory_size.to_string()),
            ("memory.train_fraction", format!("{:?}", self.memory_train_fraction)),
            ("continuum.batch_size", self.continuum_batch.to_string()),
            ("mlp.hidden", join(&self.mlp_hidden)),
            ("vae.encoder_hidden", join(&self.vae_encoder_hidden)),
            ("vae.latent", self.vae_latent.to_string()),
            ("vae.decoder_hidden", join(&self.vae_decoder_hidden)),
            ("vae.test_ll_samples", self.test_ll_samples.to_string()),
            ("bicl.eta_inner", format!("{:?}", b.eta_inner)),
            ("bicl.eta_hyper", format!("{:?}", b.eta_hyper)),
            ("bicl.beta_lambda", format!("{:?}", b.beta_lambda)),
            ("bicl.beta_w", format!("{:?}", b.beta_w)),
            ("bicl.beta_lambda_task", format!("{:?}", b.beta_lambda_task)),
            ("bicl.beta_w_task", format!("{:?}", b.beta_w_task)),
            ("bicl.inner_steps", b.inner_steps.to_string()),
            ("bicl.meta_batches", b.meta_batches.to_string()),
            ("bicl.batch_size", b.batch_size.to_string()),
            ("bicl.val_batch_size", b.val_batch_size.to_string()),
            ("bicl.optimizer", b.optimizer.keyword().into()),
            ("bicl.adam_beta1", format!("{:?}", b.adam.beta1)),
            ("bicl.adam_beta2", format!("{:?}", b.adam.beta2)),
            ("bicl.adam_eps", format!("{:?}", b.adam.eps)),
            ("bicl.second_order", second_order),
            ("bicl.outer_loss", self.outer_loss.keyword().into()),
            ("baseline.lr", format!("{:?}", self.baseline.lr)),
            ("baseline.optimizer", self.baseline.optimizer.keyword().into()),
            ("ewc.lambda", format!("{:?}", self.ewc_lambda)),
            ("ewc.mode", self.ewc_mode.keyword().into()),
            ("ewc.fisher_samples", self.fisher_samples.to_string()),
            ("seeds", join(&self.seeds)),
            ("grid.methods", join(&self.grid_methods)),
            ("grid.memories", join(&self.grid_memories)),
            ("output.dir", self.output_dir.display().to_string()),
            ("output.sample_grids", self.sample_grids.to_string()),
        ]
    }

    /// Canonical text; parsing it back gives an equal config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 over the keys that influence results (seed excluded).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !NON_SEMANTIC.contains(&k) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn effective_scheme(&self) -> SplitScheme {
        self.scheme.unwrap_or(match self.model {
            ModelKind::Mlp => SplitScheme::HiddenAsHyper,
            ModelKind::Vae => SplitScheme::OutputAsHyper,
        })
    }

    pub fn ewc(&self) -> EwcConfig {
        EwcConfig { online: self.baseline, lambda_ewc: self.ewc_lambda, mode: self.ewc_mode, fisher_samples: self.fisher_samples }
    }

    /// Name used in result files, e.g. `mnist-rotation`.
    pub fn dataset_label(&self) -> String {
        format!("{}-{}", self.dataset, self.task_family.keyword())
    }

    /// Cross-field checks not expressible per key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |k: &str, v: String, r: &str| Err(bad(k, &v, r));
        if self.tasks == 0 {
            return fail("task.count", self.tasks.to_string(), "need at least one task");
        }
        if self.continuum_batch == 0 {
            return fail("continuum.batch_size", "0".into(), "must be positive");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return fail("split.ratio", format!("{}", self.split_ratio), "must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.memory_train_fraction) {
            return fail("memory.train_fraction", format!("{}", self.memory_train_fraction), "must lie in [0, 1]");
        }
        if self.model == ModelKind::Mlp && self.task_family == TaskFamily::Class {
            return fail("task.kind", "class".into(), "class tasks are for the VAE");
        }
        if self.model == ModelKind::Vae && self.method == Method::Independent {
            return fail("method", "independent".into(), "the independent baseline is discriminative only");
        }
        if self.model == ModelKind::Mlp && self.outer_loss == LossKind::ElboNeg {
            return fail("bicl.outer_loss", "elbo".into(), "classifiers need a cross-entropy outer loss");
        }
        if self.seeds.is_empty() {
            return fail("seeds", String::new(), "need at least one seed");
        }
        if let Err(e) = self.bicl.validate() {
            return fail("bicl", String::new(), &e.to_string());
        }
        if let Err(e) = self.baseline.validate() {
            return fail("baseline.lr", format!("{}", self.baseline.lr), &e.to_string());
        }
        Ok(())
    }
}
