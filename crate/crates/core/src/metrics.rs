//! Evaluation metrics and per-task reports.

use crate::data::{EncodedExample, Target};
use crate::error::{Error, Result};
use crate::model::{MtDnn, Prediction};
use crate::numfmt::g17;
use crate::task::{Metric, TaskKind};

fn check_lengths(a: usize, b: usize, min: usize) -> Result<()> {
    if a != b {
        return Err(Error::Input(format!("metric inputs differ in length: {a} vs {b}")));
    }
    if a < min {
        return Err(Error::Input(format!("metric needs at least {min} items, got {a}")));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_lengths(pred.len(), gold.len(), 1)?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// (tp, fp, fn, tn) with `positive` as the positive class.
fn confusion(pred: &[usize], gold: &[usize], positive: usize) -> [u64; 4] {
    let mut c = [0; 4];
    for (&p, &g) in pred.iter().zip(gold) {
        let i = match (p == positive, g == positive) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        c[i] += 1;
    }
    c
}

/// `2tp / (2tp + fp + fn)`, or 0 when nothing is positive.
pub fn f1_binary(pred: &[usize], gold: &[usize], positive: usize) -> Result<f64> {
    check_lengths(pred.len(), gold.len(), 1)?;
    let [tp, fp, fn_, _] = confusion(pred, gold, positive);
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 0.0 } else { (2 * tp) as f64 / denom as f64 })
}

/// Matthews correlation over labels in {0, 1} with 1 as positive; 0 when
/// any marginal is empty.
pub fn matthews_corr(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_lengths(pred.len(), gold.len(), 1)?;
    if let Some(bad) = pred.iter().chain(gold).find(|&&l| l > 1) {
        return Err(Error::Input(format!("matthews correlation needs binary labels, found {bad}")));
    }
    let [tp, fp, fn_, tn] = confusion(pred, gold, 1).map(|v| v as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    Ok(if denom == 0.0 { 0.0 } else { (tp * tn - fp * fn_) / denom.sqrt() })
}

/// Sample correlation; 0 when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x.len(), y.len(), 2)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let mean = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = mean;
        }
        i = j;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x.len(), y.len(), 2)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task_name: String,
    pub values: Vec<(Metric, f64)>,
    pub n_examples: usize,
}

impl EvalReport {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.values.iter().find(|(m, _)| *m == metric).map(|&(_, v)| v)
    }

    /// One `task<TAB>metric<TAB>value` line per metric.
    pub fn to_tsv(&self) -> String {
        self.values
            .iter()
            .map(|(m, v)| format!("{}\t{m}\t{}\n", self.task_name, g17(*v)))
            .collect()
    }
}

/// Scores a task's declared metrics on `examples` in eval mode.
///
/// Ranking tasks count a query as correct when its positive candidate ranks
/// first; F1 and MCC there treat each candidate as a binary decision
/// (predicted positive iff ranked first).
pub fn evaluate(model: &MtDnn, task: usize, examples: &[EncodedExample]) -> Result<EvalReport> {
    let spec = &model.task(task)?.spec;
    if examples.is_empty() {
        return Err(Error::Input(format!("task {}: nothing to evaluate", spec.name)));
    }
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    let mut scores = Vec::new();
    let mut targets = Vec::new();
    let mut query_hits = Vec::new();
    for ex in examples {
        match (model.predict(task, ex)?, &ex.target) {
            (Prediction::Class { class, .. }, Target::Class(c)) => {
                pred.push(class);
                gold.push(*c);
            }
            (Prediction::Score(s), Target::Score(y)) => {
                scores.push(s);
                targets.push(*y);
            }
            (Prediction::Ranking { order, .. }, Target::Ranking(flags)) => {
                query_hits.push(usize::from(flags[order[0]]));
                for (i, &f) in flags.iter().enumerate() {
                    pred.push(usize::from(i == order[0]));
                    gold.push(usize::from(f));
                }
            }
            (_, t) => return Err(Error::Input(format!("task {} cannot score target {t:?}", spec.name))),
        }
    }
    let mut values = Vec::with_capacity(spec.metrics.len());
    for &m in &spec.metrics {
        let v = match m {
            Metric::Accuracy if spec.kind == TaskKind::Ranking => {
                query_hits.iter().sum::<usize>() as f64 / query_hits.len() as f64
            }
            Metric::Accuracy => accuracy(&pred, &gold)?,
            Metric::F1 => f1_binary(&pred, &gold, 1)?,
            Metric::Mcc => matthews_corr(&pred, &gold)?,
            Metric::Pearson => pearson(&scores, &targets)?,
            Metric::Spearman => spearman(&scores, &targets)?,
        };
        values.push((m, v));
    }
    Ok(EvalReport {
        task_name: spec.name.clone(),
        values,
        n_examples: examples.len(),
    })
}
