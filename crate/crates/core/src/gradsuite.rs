//! Finite-difference checks over every differentiable building block: the
//! primitive ops, the encoder, the four heads and the three losses.
//!
//! Each component is reduced to a scalar by a fixed random projection of its
//! output, so every output coordinate contributes to the checked gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{encode_example, Candidate, EncodedExample, Example, Vocabulary};
use crate::encoder::{encode, PARAM_PREFIX};
use crate::error::{Error, Result};
use crate::model::{head_prefix, ModelConfig, MtDnn, Output};
use crate::objectives::{cross_entropy, mse, ranking_nll};
use crate::params::{ParamId, ParamStore};
use crate::rng::{stream, Purpose};
use crate::task::{TaskKind, TaskSpec};
use crate::tensor::{grad_check, grad_check_params, GradCheckReport};
use crate::tensor::{Graph, Tensor, Var};

/// Standard deviation the suite re-draws weights with; the training init
/// (0.02) leaves attention almost uniform and hides mistakes.
const CHECK_STD: f64 = 0.3;

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub model: ModelConfig,
    pub san_steps: usize,
    /// Finite-difference step.
    pub h: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    /// d=8, 2 layers, 2 heads, five answer steps, dropout off.
    fn default() -> Self {
        let model = ModelConfig {
            hidden_dropout: 0.0,
            max_len: 16,
            ..ModelConfig::tiny(30)
        };
        SuiteConfig {
            model,
            san_steps: 5,
            h: 1e-5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
}

impl ComponentResult {
    fn from_reports(name: &str, reports: Vec<GradCheckReport>) -> Self {
        let checked = reports.iter().map(|r| r.analytic.len()).sum();
        let worst = GradCheckReport::worst_of(reports).map_or(0.0, |r| r.max_rel_error);
        ComponentResult {
            name: name.to_string(),
            max_rel_error: worst,
            checked,
        }
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `sum(y * weights)`.
fn project(g: &mut Graph<'_>, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone())?;
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

/// Projection weights for a value of `shape`.
fn probe(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, -1.0, 1.0, rng)
}

fn check<F>(f: F, theta: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'static>, Var) -> Result<Var>,
{
    grad_check(f, theta, h, f64::INFINITY)
}

fn elementwise(h: f64, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    // Values stay away from 0 so abs is differentiable at every probe point.
    let mut x = uniform(&[2, 3], 0.2, 1.5, rng);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        if i % 2 == 1 {
            *v = -*v;
        }
    }
    let c = uniform(&[2, 3], -1.0, 1.0, rng);
    let r: Vec<Tensor> = (0..7).map(|_| probe(&[2, 3], rng)).collect();
    let f = |g: &mut Graph<'static>, x: Var| -> Result<Var> {
        let c = g.constant(c.clone())?;
        let outs = [
            g.add(x, c)?,
            g.sub(c, x)?,
            g.mul(x, c)?,
            g.mul(x, x)?,
            g.scale(x, -2.5)?,
            g.add_scalar(x, 0.75)?,
            g.abs(x)?,
        ];
        let mut total = project(g, outs[0], &r[0])?;
        for (y, w) in outs.iter().zip(&r).skip(1) {
            let p = project(g, *y, w)?;
            total = g.add(total, p)?;
        }
        Ok(total)
    };
    Ok(vec![check(f, &x, h)?])
}

fn linear_algebra(h: f64, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let x = uniform(&[3, 4], -1.0, 1.0, rng);
    let right = uniform(&[4, 2], -1.0, 1.0, rng);
    let left = uniform(&[2, 3], -1.0, 1.0, rng);
    let (r1, r2, r3) = (probe(&[3, 2], rng), probe(&[2, 4], rng), probe(&[4, 3], rng));
    let f = |g: &mut Graph<'static>, x: Var| -> Result<Var> {
        let right = g.constant(right.clone())?;
        let left = g.constant(left.clone())?;
        let a = g.matmul(x, right)?;
        let b = g.matmul(left, x)?;
        let t = g.transpose(x)?;
        let pa = project(g, a, &r1)?;
        let pb = project(g, b, &r2)?;
        let pt = project(g, t, &r3)?;
        let s = g.add(pa, pb)?;
        g.add(s, pt)
    };
    // x^T x also exercises both matmul operands depending on one input.
    let r4 = probe(&[4, 4], rng);
    let gram = |g: &mut Graph<'static>, x: Var| -> Result<Var> {
        let t = g.transpose(x)?;
        let y = g.matmul(t, x)?;
        project(g, y, &r4)
    };
    Ok(vec![check(f, &x, h)?, check(gram, &x, h)?])
}

fn softmax(h: f64, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let x = uniform(&[3, 4], -2.0, 2.0, rng);
    let v = uniform(&[5], -2.0, 2.0, rng);
    let (r0, r1, rv) = (probe(&[3, 4], rng), probe(&[3, 4], rng), probe(&[5], rng));
    let rows = |g: &mut Graph<'static>, x: Var| -> Result<Var> {
        let a = g.softmax(x, 0)?;
        let b = g.softmax(x, 1)?;
        let pa = project(g, a, &r0)?;
        let pb = project(g, b, &r1)?;
        g.add(pa, pb)
    };
    let vector = |g: &mut Graph<'static>, x: Var| -> Result<Var> {
        let y = g.softmax(x, 0)?;
        project(g, y, &rv)
    };
    Ok(vec![check(rows, &x, h)?, check(vector, &v, h)?])
}

fn layer_norm(h: f64, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let x = uniform(&[3, 5], -2.0, 2.0, rng);
    let gain = uniform(&[5], 0.5, 1.5, rng);
    let bias = uniform(&[5], -0.5, 0.5, rng);
    let r = probe(&[3, 5], rng);
    let eps = 1e-5;
    let wrt_x = |g: &mut Graph<'static>, x: Var| -> Result<Var> {
        let (ga, b) = (g.constant(gain.clone())?, g.constant(bias.clone())?);
        let y = g.layer_norm(x, ga, b, eps)?;
        project(g, y, &r)
    };
    let wrt_gain = |g: &mut Graph<'static>, ga: Var| -> Result<Var> {
        let (x, b) = (g.constant(x.clone())?, g.constant(bias.clone())?);
        let y = g.layer_norm(x, ga, b, eps)?;
        project(g, y, &r)
    };
    let wrt_bias = |g: &mut Graph<'static>, b: Var| -> Result<Var> {
        let (x, ga) = (g.constant(x.clone())?, g.constant(gain.clone())?);
        let y = g.layer_norm(x, ga, b, eps)?;
        project(g, y, &r)
    };
    Ok(vec![check(wrt_x, &x, h)?, check(wrt_gain, &gain, h)?, check(wrt_bias, &bias, h)?])
}

fn embedding(h: f64, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let table = uniform(&[5, 3], -1.0, 1.0, rng);
    let ids = [1, 3, 1, 4];
    let r = probe(&[4, 3], rng);
    let f = |g: &mut Graph<'static>, t: Var| -> Result<Var> {
        let y = g.embedding(t, &ids)?;
        project(g, y, &r)
    };
    Ok(vec![check(f, &table, h)?])
}

fn activations(h: f64, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let x = uniform(&[6], -2.0, 2.0, rng);
    let r: Vec<Tensor> = (0..5).map(|_| probe(&[6], rng)).collect();
    let f = |g: &mut Graph<'static>, x: Var| -> Result<Var> {
        let sq = g.mul(x, x)?;
        let positive = g.add_scalar(sq, 0.5)?;
        let outs = [g.gelu(x)?, g.sigmoid(x)?, g.tanh(x)?, g.exp(x)?, g.log(positive)?];
        let mut total = project(g, outs[0], &r[0])?;
        for (y, w) in outs.iter().zip(&r).skip(1) {
            let p = project(g, *y, w)?;
            total = g.add(total, p)?;
        }
        Ok(total)
    };
    Ok(vec![check(f, &x, h)?])
}

fn structural(h: f64, seed: u64, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let x = uniform(&[3, 4], -1.0, 1.0, rng);
    let bias = uniform(&[4], -1.0, 1.0, rng);
    let r_cat = probe(&[3, 8], rng);
    let r_slice = probe(&[2, 4], rng);
    let r_reshape = probe(&[4, 3], rng);
    let r_gather = probe(&[3], rng);
    let r_row = probe(&[4], rng);
    let r_bias = probe(&[3, 4], rng);
    let r_drop = probe(&[3, 4], rng);
    let f = |g: &mut Graph<'static>, x: Var| -> Result<Var> {
        let b = g.constant(bias.clone())?;
        let sq = g.mul(x, x)?;
        let outs = [
            (g.concat(&[x, sq], 1)?, &r_cat),
            (g.slice(x, 0, 1, 3)?, &r_slice),
            (g.reshape(x, &[4, 3])?, &r_reshape),
            (g.add_bias(x, b)?, &r_bias),
        ];
        let mut total = g.sum(x)?;
        let m = g.mean(sq)?;
        total = g.add(total, m)?;
        for (y, w) in outs {
            let p = project(g, y, w)?;
            total = g.add(total, p)?;
        }
        let flat = g.reshape(x, &[12])?;
        let picked = g.gather(flat, &[0, 5, 5])?;
        let p = project(g, picked, &r_gather)?;
        total = g.add(total, p)?;
        let row = g.row(x, 2)?;
        let p = project(g, row, &r_row)?;
        total = g.add(total, p)?;
        // A fresh stream per evaluation freezes the mask across probes.
        let mut drop_rng = stream(seed, Purpose::Dropout);
        let dropped = g.dropout(x, 0.3, true, &mut drop_rng)?;
        let p = project(g, dropped, &r_drop)?;
        g.add(total, p)
    };
    Ok(vec![check(f, &x, h)?])
}

/// Re-draws every parameter matching `prefix`: layer-norm gains around 1,
/// everything else around 0, all with spread [`CHECK_STD`].
fn randomize(store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut().filter(|p| p.name.starts_with(prefix)) {
        let center = if p.name.ends_with("norm.gain") { 1.0 } else { 0.0 };
        for v in p.value.data_mut() {
            *v = center + rng.random_range(-CHECK_STD..CHECK_STD);
        }
    }
}

fn ids_with_prefix(store: &ParamStore, prefix: &str) -> Vec<ParamId> {
    store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect()
}

struct Fixture {
    model: MtDnn,
    examples: Vec<EncodedExample>,
}

fn fixture(config: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<Fixture> {
    let specs = [
        TaskSpec::new("single", TaskKind::Single),
        TaskSpec::new("pair", TaskKind::Pair).with_san(config.san_steps, 0.0),
        TaskSpec::new("regression", TaskKind::Regression),
        TaskSpec::new("ranking", TaskKind::Ranking),
    ];
    let mut model = MtDnn::new(config.model.clone(), &specs, config.seed)?;
    randomize(&mut model.store, "", rng);
    let vocab = Vocabulary::synthetic(config.model.vocab_size)?;
    let candidate = |text: &str, positive| Candidate {
        text: text.into(),
        positive,
    };
    let raw = [
        Example::Single {
            text: "w1 w5 w9".into(),
            class: 1,
        },
        Example::Pair {
            text_a: "w2 w3 w4".into(),
            text_b: "w3 w7".into(),
            class: 2,
        },
        Example::Regression {
            text_a: "w6 w8".into(),
            text_b: "w8 w1 w0".into(),
            score: 0.4,
        },
        Example::Ranking {
            query_id: "q".into(),
            query: "w4 w9".into(),
            candidates: vec![candidate("w9 w2", true), candidate("w3", false), candidate("w5 w6", false)],
        },
    ];
    let examples = raw
        .iter()
        .map(|ex| encode_example(ex, &vocab, config.model.max_len))
        .collect::<Result<Vec<_>>>()?;
    Ok(Fixture { model, examples })
}

fn encoder_check(fx: &mut Fixture, h: f64, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let input = fx.examples[1].inputs[0].clone();
    let r = probe(&[input.len(), fx.model.config.d_model], rng);
    let encoder = fx.model.encoder.clone();
    let ids = ids_with_prefix(&fx.model.store, PARAM_PREFIX);
    let f = |g: &mut Graph<'_>| -> Result<Var> {
        let mut unused = stream(0, Purpose::Dropout);
        let out = encode(g, &input, &encoder, false, &mut unused)?;
        project(g, out.hidden, &r)
    };
    Ok(vec![grad_check_params(&mut fx.model.store, &ids, f, h, f64::INFINITY)?])
}

fn head_check(fx: &mut Fixture, task: usize, h: f64, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let example = fx.examples[task].clone();
    let name = fx.model.tasks[task].spec.name.clone();
    let ids = ids_with_prefix(&fx.model.store, &format!("{}.", head_prefix(&name)));
    let model = fx.model.clone();
    let shape = {
        let mut g = Graph::with_params(&model.store);
        let out = model.forward(&mut g, task, &example, false, &mut stream(0, Purpose::Dropout))?;
        let v = match out {
            Output::Distribution(v) | Output::Score(v) | Output::Relevances(v) => v,
        };
        g.shape(v).to_vec()
    };
    let r = probe(&shape, rng);
    let f = |g: &mut Graph<'_>| -> Result<Var> {
        let mut unused = stream(0, Purpose::Dropout);
        let out = model.forward(g, task, &example, false, &mut unused)?;
        let (Output::Distribution(v) | Output::Score(v) | Output::Relevances(v)) = out;
        project(g, v, &r)
    };
    Ok(vec![grad_check_params(&mut fx.model.store, &ids, f, h, f64::INFINITY)?])
}

fn loss_checks(h: f64, rng: &mut ChaCha8Rng) -> Result<Vec<(&'static str, Vec<GradCheckReport>)>> {
    let logits = uniform(&[2, 3], -2.0, 2.0, rng);
    let ce = |g: &mut Graph<'static>, x: Var| -> Result<Var> {
        let mut preds = Vec::new();
        for i in 0..2 {
            let row = g.row(x, i)?;
            preds.push(g.softmax(row, 0)?);
        }
        Ok(cross_entropy(g, &preds, &[2, 0], "ce")?.value)
    };
    let scores = uniform(&[3], -1.0, 2.0, rng);
    let squared = |g: &mut Graph<'static>, x: Var| -> Result<Var> {
        let preds = (0..3).map(|i| g.slice(x, 0, i, i + 1)).collect::<Result<Vec<_>>>()?;
        Ok(mse(g, &preds, &[0.25, 1.0, -0.5], "mse")?.value)
    };
    let rels = uniform(&[7], 0.05, 0.95, rng);
    let ranking = |g: &mut Graph<'static>, x: Var| -> Result<Var> {
        let first = g.slice(x, 0, 0, 4)?;
        let second = g.slice(x, 0, 4, 7)?;
        let flags = [vec![false, true, false, false], vec![false, false, true]];
        Ok(ranking_nll(g, &[first, second], &flags, 1.0, "rank")?.value)
    };
    Ok(vec![
        ("loss.cross_entropy", vec![check(ce, &logits, h)?]),
        ("loss.mse", vec![check(squared, &scores, h)?]),
        ("loss.ranking_nll", vec![check(ranking, &rels, h)?]),
    ])
}

/// Runs every component; the worst relative error of each is reported and
/// compared against a tolerance by the caller.
pub fn run_suite(config: &SuiteConfig) -> Result<Vec<ComponentResult>> {
    config.model.validate()?;
    if config.model.hidden_dropout != 0.0 {
        return Err(Error::Config("gradient checks need hidden_dropout = 0".into()));
    }
    let h = config.h;
    let mut rng = stream(config.seed, Purpose::Sampling);
    let mut out = vec![
        ComponentResult::from_reports("op.elementwise", elementwise(h, &mut rng)?),
        ComponentResult::from_reports("op.matmul", linear_algebra(h, &mut rng)?),
        ComponentResult::from_reports("op.softmax", softmax(h, &mut rng)?),
        ComponentResult::from_reports("op.layer_norm", layer_norm(h, &mut rng)?),
        ComponentResult::from_reports("op.embedding", embedding(h, &mut rng)?),
        ComponentResult::from_reports("op.activations", activations(h, &mut rng)?),
        ComponentResult::from_reports("op.structural", structural(h, config.seed, &mut rng)?),
    ];
    let mut fx = fixture(config, &mut rng)?;
    out.push(ComponentResult::from_reports("encoder", encoder_check(&mut fx, h, &mut rng)?));
    for (task, name) in ["head.classification", "head.san", "head.similarity", "head.ranking"]
        .into_iter()
        .enumerate()
    {
        out.push(ComponentResult::from_reports(name, head_check(&mut fx, task, h, &mut rng)?));
    }
    for (name, reports) in loss_checks(h, &mut rng)? {
        out.push(ComponentResult::from_reports(name, reports));
    }
    Ok(out)
}
