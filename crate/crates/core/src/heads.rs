//! Task-specific output modules on top of the shared encoder.
//!
//! * classification: softmax over `W^T x` for the `[CLS]` vector `x`
//! * similarity: unbounded score `w^T x`
//! * ranking: relevance `sigmoid(w^T x)`
//! * pairwise classification: a multi-step answer module that keeps a
//!   state over the second sentence's memory, attends into the first
//!   sentence's memory at each step, and averages the per-step predictions.

use rand::Rng;

use crate::encoder::INIT_STD;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone)]
pub struct ClassificationHead {
    /// `d x n_labels`
    pub weight: ParamId,
    pub n_labels: usize,
}

#[derive(Debug, Clone)]
pub struct SimilarityHead {
    /// length `d`
    pub weight: ParamId,
}

#[derive(Debug, Clone)]
pub struct RankingHead {
    /// length `d`
    pub weight: ParamId,
}

/// Standard GRU cell with reset, update and candidate blocks packed in that
/// order along the `3d` axis.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub size: usize,
}

impl GruCell {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, size: usize, rng: &mut R) -> Result<Self> {
        Ok(GruCell {
            w_input: store.add_normal(format!("{prefix}.w_input"), &[size, 3 * size], INIT_STD, rng)?,
            w_hidden: store.add_normal(format!("{prefix}.w_hidden"), &[size, 3 * size], INIT_STD, rng)?,
            b_input: store.add_constant(format!("{prefix}.b_input"), &[3 * size], 0.0)?,
            b_hidden: store.add_constant(format!("{prefix}.b_hidden"), &[3 * size], 0.0)?,
            size,
        })
    }

    /// `h' = (1 - z) * n + z * h`.
    pub fn step(&self, g: &mut Graph<'_>, hidden: Var, input: Var) -> Result<Var> {
        let d = self.size;
        let (wi, wh) = (g.param(self.w_input)?, g.param(self.w_hidden)?);
        let (bi, bh) = (g.param(self.b_input)?, g.param(self.b_hidden)?);
        let gi = g.matmul(input, wi)?;
        let gi = g.add(gi, bi)?;
        let gh = g.matmul(hidden, wh)?;
        let gh = g.add(gh, bh)?;
        let block = |g: &mut Graph<'_>, v: Var, i: usize| g.slice(v, 0, i * d, (i + 1) * d);
        let (ri, rh) = (block(g, gi, 0)?, block(g, gh, 0)?);
        let (zi, zh) = (block(g, gi, 1)?, block(g, gh, 1)?);
        let (ni, nh) = (block(g, gi, 2)?, block(g, gh, 2)?);
        let r = g.add(ri, rh)?;
        let r = g.sigmoid(r)?;
        let z = g.add(zi, zh)?;
        let z = g.sigmoid(z)?;
        let gated = g.mul(r, nh)?;
        let n = g.add(ni, gated)?;
        let n = g.tanh(n)?;
        // n + z * (h - n)
        let diff = g.sub(hidden, n)?;
        let keep = g.mul(z, diff)?;
        g.add(n, keep)
    }
}

#[derive(Debug, Clone)]
pub struct SanHead {
    /// length `d`, scores hypothesis rows for the initial summary
    pub w_summary: ParamId,
    /// `d x d` bilinear attention from the state into the premise memory
    pub w_attention: ParamId,
    pub gru: GruCell,
    /// `4d x n_labels`
    pub w_output: ParamId,
    pub steps: usize,
    pub prediction_dropout: f64,
    pub n_labels: usize,
}

#[derive(Debug, Clone)]
pub enum HeadParams {
    Classification(ClassificationHead),
    Similarity(SimilarityHead),
    SanPairwise(SanHead),
    Ranking(RankingHead),
}

impl HeadParams {
    pub fn classification<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        n_labels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_labels(n_labels)?;
        let weight = store.add_normal(format!("{prefix}.weight"), &[d, n_labels], INIT_STD, rng)?;
        Ok(HeadParams::Classification(ClassificationHead { weight, n_labels }))
    }

    pub fn similarity<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Result<Self> {
        let weight = store.add_normal(format!("{prefix}.weight"), &[d], INIT_STD, rng)?;
        Ok(HeadParams::Similarity(SimilarityHead { weight }))
    }

    pub fn ranking<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Result<Self> {
        let weight = store.add_normal(format!("{prefix}.weight"), &[d], INIT_STD, rng)?;
        Ok(HeadParams::Ranking(RankingHead { weight }))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn san<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        n_labels: usize,
        steps: usize,
        prediction_dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_labels(n_labels)?;
        if steps == 0 {
            return Err(Error::Config("answer module needs at least one reasoning step".into()));
        }
        if !(0.0..1.0).contains(&prediction_dropout) {
            return Err(Error::Config(format!(
                "prediction dropout {prediction_dropout} outside [0, 1)"
            )));
        }
        Ok(HeadParams::SanPairwise(SanHead {
            w_summary: store.add_normal(format!("{prefix}.w_summary"), &[d], INIT_STD, rng)?,
            w_attention: store.add_normal(format!("{prefix}.w_attention"), &[d, d], INIT_STD, rng)?,
            gru: GruCell::init(store, &format!("{prefix}.gru"), d, rng)?,
            w_output: store.add_normal(format!("{prefix}.w_output"), &[4 * d, n_labels], INIT_STD, rng)?,
            steps,
            prediction_dropout,
            n_labels,
        }))
    }
}

fn check_labels(n_labels: usize) -> Result<()> {
    if n_labels < 2 {
        return Err(Error::Config(format!("classification needs at least 2 labels, got {n_labels}")));
    }
    Ok(())
}

/// Class distribution `softmax(W^T x)`.
pub fn classify_single(g: &mut Graph<'_>, x: Var, head: &ClassificationHead) -> Result<Var> {
    let w = g.param(head.weight)?;
    let logits = g.matmul(x, w)?;
    g.softmax(logits, 0)
}

/// Similarity score `w^T x`, a scalar.
pub fn similarity(g: &mut Graph<'_>, x: Var, head: &SimilarityHead) -> Result<Var> {
    let w = g.param(head.weight)?;
    g.matmul(x, w)
}

/// Relevance `sigmoid(w^T x)`, a scalar in (0, 1).
pub fn relevance(g: &mut Graph<'_>, x: Var, head: &RankingHead) -> Result<Var> {
    let w = g.param(head.weight)?;
    let score = g.matmul(x, w)?;
    g.sigmoid(score)
}

/// Candidate order by descending score; equal scores keep their input order.
pub fn order_by_score(scores: &[f64]) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::Input("no candidates to rank".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order)
}

/// One reasoning step of the answer module, as plain values.
#[derive(Debug, Clone)]
pub struct SanStep {
    pub beta: Vec<f64>,
    pub x: Vec<f64>,
    pub state: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SanTrace {
    pub alpha: Vec<f64>,
    pub steps: Vec<SanStep>,
    /// Which step predictions entered the average (all true outside training).
    pub kept: Vec<bool>,
}

/// Attention read `sum_j beta_j M_j` with `beta = softmax(M W s)`.
fn attend(g: &mut Graph<'_>, memory: Var, w_attention: Var, state: Var) -> Result<(Var, Var)> {
    let projected = g.matmul(w_attention, state)?;
    let scores = g.matmul(memory, projected)?;
    let beta = g.softmax(scores, 0)?;
    let read = g.matmul(beta, memory)?;
    Ok((beta, read))
}

/// Multi-step answer module over premise memory `premise` (`m x d`) and
/// hypothesis memory `hypothesis` (`n x d`).
///
/// Step 0 uses the hypothesis summary `s0` as its state; each later step
/// advances the state with the GRU on that step's premise read. In training
/// each step's prediction is dropped with probability `prediction_dropout`
/// and the survivors are averaged; if none survive all are kept.
pub fn san_forward<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    premise: Var,
    hypothesis: Var,
    head: &SanHead,
    training: bool,
    rng: &mut R,
) -> Result<(Var, SanTrace)> {
    for (name, v) in [("premise", premise), ("hypothesis", hypothesis)] {
        match g.shape(v) {
            [rows, _] if *rows > 0 => {}
            s => return Err(Error::Input(format!("{name} memory is empty or malformed: {s:?}"))),
        }
    }
    if head.steps == 0 {
        return Err(Error::Config("answer module needs at least one reasoning step".into()));
    }
    let w1 = g.param(head.w_summary)?;
    let w2 = g.param(head.w_attention)?;
    let w3 = g.param(head.w_output)?;

    let summary_scores = g.matmul(hypothesis, w1)?;
    let alpha = g.softmax(summary_scores, 0)?;
    let mut state = g.matmul(alpha, hypothesis)?;

    let mut step_probs = Vec::with_capacity(head.steps);
    let mut trace = SanTrace {
        alpha: g.value(alpha).data().to_vec(),
        steps: Vec::with_capacity(head.steps),
        kept: vec![true; head.steps],
    };
    for k in 0..head.steps {
        let (beta, read) = attend(g, premise, w2, state)?;
        if k > 0 {
            state = head.gru.step(g, state, read)?;
        }
        let diff = g.sub(state, read)?;
        let abs_diff = g.abs(diff)?;
        let prod = g.mul(state, read)?;
        let features = g.concat(&[state, read, abs_diff, prod], 0)?;
        let logits = g.matmul(features, w3)?;
        let probs = g.softmax(logits, 0)?;
        trace.steps.push(SanStep {
            beta: g.value(beta).data().to_vec(),
            x: g.value(read).data().to_vec(),
            state: g.value(state).data().to_vec(),
            probs: g.value(probs).data().to_vec(),
        });
        step_probs.push(probs);
    }

    if training && head.prediction_dropout > 0.0 {
        let p = head.prediction_dropout;
        let mask: Vec<bool> = (0..head.steps).map(|_| rng.random::<f64>() >= p).collect();
        if mask.iter().any(|&k| k) {
            trace.kept = mask;
        }
    }
    let kept: Vec<Var> = step_probs
        .iter()
        .zip(&trace.kept)
        .filter_map(|(&v, &keep)| keep.then_some(v))
        .collect();
    let mut total = kept[0];
    for &v in &kept[1..] {
        total = g.add(total, v)?;
    }
    let avg = if kept.len() == 1 {
        total
    } else {
        g.scale(total, 1.0 / kept.len() as f64)?
    };
    Ok((avg, trace))
}
