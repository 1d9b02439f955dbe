use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// One sentence, one class (CoLA/SST-2 style).
    Single,
    /// Sentence pair, one class, answered by the multi-step head (NLI style).
    Pair,
    /// Sentence pair with a real-valued score (STS-B style).
    Regression,
    /// Query with candidate answers, one positive (QNLI style).
    Ranking,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Single => "single",
            TaskKind::Pair => "pair",
            TaskKind::Regression => "regression",
            TaskKind::Ranking => "ranking",
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, TaskKind::Single | TaskKind::Pair)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    F1,
    Mcc,
    Pearson,
    Spearman,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::Mcc => "mcc",
            Metric::Pearson => "pearson",
            Metric::Spearman => "spearman",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "accuracy" => Metric::Accuracy,
            "f1" => Metric::F1,
            "mcc" => Metric::Mcc,
            "pearson" => Metric::Pearson,
            "spearman" => Metric::Spearman,
            other => return Err(Error::Config(format!("unknown metric {other:?}"))),
        })
    }
}

pub const DEFAULT_HEAD_DROPOUT: f64 = 0.1;
pub const DEFAULT_SAN_STEPS: usize = 5;
pub const DEFAULT_PREDICTION_DROPOUT: f64 = 0.1;

/// Everything the model and trainer need to know about one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    /// Class names; the position of a name is its class index.
    pub labels: Vec<String>,
    /// Dropout applied to the head's input.
    pub dropout: f64,
    pub metrics: Vec<Metric>,
    pub san_steps: usize,
    pub prediction_dropout: f64,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, kind: TaskKind) -> Self {
        let labels: &[&str] = match kind {
            TaskKind::Single => &["0", "1"],
            TaskKind::Pair => &["0", "1", "2"],
            TaskKind::Regression | TaskKind::Ranking => &[],
        };
        let metrics = match kind {
            TaskKind::Single | TaskKind::Pair | TaskKind::Ranking => vec![Metric::Accuracy],
            TaskKind::Regression => vec![Metric::Pearson, Metric::Spearman],
        };
        TaskSpec {
            name: name.into(),
            kind,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            dropout: DEFAULT_HEAD_DROPOUT,
            metrics,
            san_steps: DEFAULT_SAN_STEPS,
            prediction_dropout: DEFAULT_PREDICTION_DROPOUT,
        }
    }

    pub fn with_labels<S: Into<String>>(mut self, labels: impl IntoIterator<Item = S>) -> Self {
        self.labels = labels.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_dropout(mut self, dropout: f64) -> Self {
        self.dropout = dropout;
        self
    }

    pub fn with_metrics(mut self, metrics: impl IntoIterator<Item = Metric>) -> Self {
        self.metrics = metrics.into_iter().collect();
        self
    }

    pub fn with_san(mut self, steps: usize, prediction_dropout: f64) -> Self {
        self.san_steps = steps;
        self.prediction_dropout = prediction_dropout;
        self
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("task {}: {msg}", self.name)));
        if self.name.is_empty() || self.name.contains(|c: char| c.is_whitespace() || c == '.') {
            return bad("name must be non-empty without whitespace or dots".into());
        }
        if self.kind.is_classification() {
            if self.labels.len() < 2 {
                return bad(format!("needs at least 2 labels, got {}", self.labels.len()));
            }
            let mut seen = std::collections::HashSet::new();
            if let Some(dup) = self.labels.iter().find(|l| !seen.insert(l.as_str())) {
                return bad(format!("duplicate label {dup:?}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.kind == TaskKind::Pair {
            if self.san_steps == 0 {
                return bad("san_steps must be at least 1".into());
            }
            if !(0.0..1.0).contains(&self.prediction_dropout) {
                return bad(format!("prediction dropout {} outside [0, 1)", self.prediction_dropout));
            }
        }
        if self.metrics.is_empty() {
            return bad("declares no metrics".into());
        }
        for &m in &self.metrics {
            let ok = match m {
                Metric::Accuracy => self.kind != TaskKind::Regression,
                Metric::F1 | Metric::Mcc => {
                    self.kind == TaskKind::Ranking || (self.kind.is_classification() && self.labels.len() == 2)
                }
                Metric::Pearson | Metric::Spearman => self.kind == TaskKind::Regression,
            };
            if !ok {
                return bad(format!("metric {m} does not apply to a {} task", self.kind));
            }
        }
        Ok(())
    }
}
