#![allow(dead_code)]

use mtdnn::data::{encode_split, make_synthetic_with, EncodedExample, SyntheticOptions, Target, Vocabulary};
use mtdnn::model::Prediction;
use mtdnn::rng::{stream, Purpose};
use mtdnn::{ModelConfig, MtDnn, TaskKind};

pub const VOCAB: usize = 100;

/// d=32, 2 layers, 2 heads over the 100-word synthetic vocabulary.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        max_len: 32,
        ..ModelConfig::new(32, 2, 2, VOCAB)
    }
}

pub fn synthetic(kind: TaskKind, size: usize, markers: &[usize], data_seed: u64) -> Vec<EncodedExample> {
    let vocab = Vocabulary::synthetic(VOCAB).unwrap();
    let options = SyntheticOptions {
        markers: markers.to_vec(),
        ..SyntheticOptions::default()
    };
    let mut rng = stream(data_seed, Purpose::Sampling);
    let split = make_synthetic_with(kind, size, VOCAB, &options, &mut rng).unwrap();
    encode_split(&split, &vocab, 32).unwrap()
}

/// Eval-mode fraction of examples predicted correctly; for ranking, the
/// fraction of queries whose positive candidate comes first.
pub fn train_accuracy(model: &MtDnn, task: usize, examples: &[EncodedExample]) -> f64 {
    let hits = examples
        .iter()
        .filter(|ex| match (model.predict(task, ex).unwrap(), &ex.target) {
            (Prediction::Class { class, .. }, Target::Class(c)) => class == *c,
            (Prediction::Ranking { order, .. }, Target::Ranking(flags)) => flags[order[0]],
            (p, t) => panic!("prediction {p:?} does not fit target {t:?}"),
        })
        .count();
    hits as f64 / examples.len() as f64
}

/// Eval-mode mean squared error of a regression task.
pub fn train_mse(model: &MtDnn, task: usize, examples: &[EncodedExample]) -> f64 {
    let total: f64 = examples
        .iter()
        .map(|ex| match (model.predict(task, ex).unwrap(), &ex.target) {
            (Prediction::Score(s), Target::Score(y)) => (s - y).powi(2),
            (p, t) => panic!("prediction {p:?} does not fit target {t:?}"),
        })
        .sum();
    total / examples.len() as f64
}

/// Eval-mode mean cross-entropy of a classification task.
pub fn train_cross_entropy(model: &MtDnn, task: usize, examples: &[EncodedExample]) -> f64 {
    let total: f64 = examples
        .iter()
        .map(|ex| match (model.predict(task, ex).unwrap(), &ex.target) {
            (Prediction::Class { probs, .. }, Target::Class(c)) => -probs[*c].max(1e-12).ln(),
            (p, t) => panic!("prediction {p:?} does not fit target {t:?}"),
        })
        .sum();
    total / examples.len() as f64
}

pub mod oracle {
    //! Metric definitions written from scratch, sharing nothing with the library.

    pub fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
        let mut hits = 0.0;
        for i in 0..pred.len() {
            if pred[i] == gold[i] {
                hits += 1.0;
            }
        }
        hits / pred.len() as f64
    }

    /// Harmonic mean of precision and recall, 0 when either is undefined or zero.
    pub fn f1(pred: &[usize], gold: &[usize], positive: usize) -> f64 {
        let predicted = pred.iter().filter(|&&p| p == positive).count() as f64;
        let actual = gold.iter().filter(|&&g| g == positive).count() as f64;
        let tp = pred.iter().zip(gold).filter(|(&p, &g)| p == positive && g == positive).count() as f64;
        if tp == 0.0 {
            return 0.0;
        }
        let (precision, recall) = (tp / predicted, tp / actual);
        2.0 * precision * recall / (precision + recall)
    }

    /// Pearson correlation computed from raw sums.
    pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let cov = n * sxy - sx * sy;
        let vx = n * sxx - sx * sx;
        let vy = n * syy - sy * sy;
        if vx <= 1e-12 * sxx.max(1.0) * n || vy <= 1e-12 * syy.max(1.0) * n {
            return 0.0;
        }
        cov / (vx * vy).sqrt()
    }

    /// MCC as the Pearson correlation of the two 0/1 vectors.
    pub fn mcc(pred: &[usize], gold: &[usize]) -> f64 {
        let p: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
        let g: Vec<f64> = gold.iter().map(|&v| v as f64).collect();
        pearson(&p, &g)
    }

    /// Rank of each value by counting: 1 + smaller values + half of the other equal values.
    pub fn ranks(x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let below = x.iter().filter(|&&w| w < v).count() as f64;
                let equal = x.iter().filter(|&&w| w == v).count() as f64;
                1.0 + below + (equal - 1.0) / 2.0
            })
            .collect()
    }

    pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
        pearson(&ranks(x), &ranks(y))
    }
}
