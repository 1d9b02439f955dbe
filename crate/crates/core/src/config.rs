//! TOML run configuration for the command-line tool.
//!
//! ```toml
//! output = "runs/glue"          # optional; --out overrides it
//!
//! [model]
//! vocab = "vocab.txt"
//! d_model = 32
//! n_layers = 2
//! n_heads = 2
//! # ffn_multiplier = 4, max_len = 512, san_steps = 5,
//! # hidden_dropout = 0.1, layer_norm_eps = 1e-12
//!
//! [training]
//! # lr_peak = 5e-5, batch_size = 32, epochs = 5, warmup_fraction = 0.1,
//! # clip_norm = 1.0, adamax_beta1 = 0.9, adamax_beta2 = 0.999,
//! # adamax_eps = 1e-8, gamma = 1.0, optimizer = "adamax"
//!
//! [[tasks]]
//! name = "sst"
//! kind = "single"               # single | pair | regression | ranking
//! train = "sst/train.tsv"
//! dev = "sst/dev.tsv"           # optional, as is test
//! # labels, dropout, metrics, san_steps, prediction_dropout
//! ```
//!
//! Relative paths resolve against the directory holding the config file.
//! Unknown keys anywhere are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::{load_tsv, DatasetSplit, Split, Vocabulary};
use crate::encoder::MAX_LEN;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::task::{Metric, TaskKind, TaskSpec, DEFAULT_PREDICTION_DROPOUT, DEFAULT_SAN_STEPS};
use crate::trainer::{Optimizer, TrainConfig};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub vocab: PathBuf,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    #[serde(default = "default_ffn")]
    pub ffn_multiplier: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Default number of answer-module steps for pair tasks.
    #[serde(default = "default_san_steps")]
    pub san_steps: usize,
    #[serde(default = "default_hidden_dropout")]
    pub hidden_dropout: f64,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

fn default_ffn() -> usize {
    4
}
fn default_max_len() -> usize {
    MAX_LEN
}
fn default_san_steps() -> usize {
    DEFAULT_SAN_STEPS
}
fn default_hidden_dropout() -> f64 {
    0.1
}
fn default_ln_eps() -> f64 {
    1e-12
}

/// Every [`TrainConfig`] field except the seed, which comes from the command line.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub lr_peak: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub adamax_beta1: f64,
    pub adamax_beta2: f64,
    pub adamax_eps: f64,
    pub gamma: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainingSection {
            lr_peak: d.lr_peak,
            batch_size: d.batch_size,
            epochs: d.epochs,
            warmup_fraction: d.warmup_fraction,
            clip_norm: d.clip_norm,
            adamax_beta1: d.adamax_beta1,
            adamax_beta2: d.adamax_beta2,
            adamax_eps: d.adamax_eps,
            gamma: d.gamma,
            optimizer: d.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub name: String,
    pub kind: TaskKind,
    pub train: PathBuf,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub labels: Option<Vec<String>>,
    pub dropout: Option<f64>,
    pub metrics: Option<Vec<Metric>>,
    pub san_steps: Option<usize>,
    pub prediction_dropout: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output: Option<PathBuf>,
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    pub tasks: Vec<TaskSection>,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Parses and validates `text`, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.model.vocab);
        if let Some(out) = config.output.as_mut() {
            resolve(out);
        }
        for t in &mut config.tasks {
            resolve(&mut t.train);
            t.dev.iter_mut().chain(t.test.iter_mut()).for_each(resolve);
        }
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one [[tasks]] entry is required".into()));
        }
        let specs = self.task_specs();
        let mut seen = std::collections::HashSet::new();
        for spec in &specs {
            spec.validate()?;
            if !seen.insert(spec.name.as_str()) {
                return Err(Error::Config(format!("task {} is listed twice", spec.name)));
            }
        }
        // Vocabulary size is not known yet; any positive value validates the rest.
        self.model_config(1).validate()?;
        self.train_config(0).validate()
    }

    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.tasks
            .iter()
            .map(|t| {
                let mut spec = TaskSpec::new(&t.name, t.kind).with_san(
                    t.san_steps.unwrap_or(self.model.san_steps),
                    t.prediction_dropout.unwrap_or(DEFAULT_PREDICTION_DROPOUT),
                );
                if let Some(labels) = &t.labels {
                    spec = spec.with_labels(labels.iter().cloned());
                }
                if let Some(d) = t.dropout {
                    spec = spec.with_dropout(d);
                }
                if let Some(m) = &t.metrics {
                    spec = spec.with_metrics(m.iter().copied());
                }
                spec
            })
            .collect()
    }

    pub fn task(&self, name: &str) -> Option<&TaskSection> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            ffn_multiplier: m.ffn_multiplier,
            vocab_size,
            max_len: m.max_len,
            hidden_dropout: m.hidden_dropout,
            layer_norm_eps: m.layer_norm_eps,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            lr_peak: t.lr_peak,
            batch_size: t.batch_size,
            epochs: t.epochs,
            warmup_fraction: t.warmup_fraction,
            clip_norm: t.clip_norm,
            adamax_beta1: t.adamax_beta1,
            adamax_beta2: t.adamax_beta2,
            adamax_eps: t.adamax_eps,
            gamma: t.gamma,
            seed,
            optimizer: t.optimizer,
        }
    }

    pub fn load_vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.model.vocab)
    }

    /// Loads one split of a task; `None` when the split has no file.
    pub fn load_split(&self, task: &str, split: Split) -> Result<Option<DatasetSplit>> {
        let section = self
            .task(task)
            .ok_or_else(|| Error::Config(format!("task {task} is not in the config")))?;
        let spec = self
            .task_specs()
            .into_iter()
            .find(|s| s.name == task)
            .expect("sections and specs correspond");
        let path = match split {
            Split::Train => Some(&section.train),
            Split::Dev => section.dev.as_ref(),
            Split::Test => section.test.as_ref(),
        };
        path.map(|p| load_tsv(p, &spec, split)).transpose()
    }
}
