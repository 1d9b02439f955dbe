//! The multi-task network: one shared encoder and a head per task.

use rand::Rng;

use crate::data::{EncodedExample, Target};
use crate::encoder::{cls_vector, encode, EncoderParams, PackedInput, MAX_LEN};
use crate::error::{Error, Result};
use crate::heads::{classify_single, order_by_score, relevance, san_forward, similarity, HeadParams};
use crate::objectives::{cross_entropy, mse, ranking_nll, LossValue};
use crate::params::ParamStore;
use crate::rng::{stream, Purpose};
use crate::task::{TaskKind, TaskSpec};
use crate::tensor::{Graph, Var};

/// Shape and regularization of the shared encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_multiplier: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Dropout on attention and feed-forward outputs inside each layer.
    pub hidden_dropout: f64,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    pub fn new(d_model: usize, n_layers: usize, n_heads: usize, vocab_size: usize) -> Self {
        ModelConfig {
            d_model,
            n_layers,
            n_heads,
            ffn_multiplier: 4,
            vocab_size,
            max_len: MAX_LEN,
            hidden_dropout: 0.1,
            layer_norm_eps: 1e-12,
        }
    }

    /// d=8, 2 layers, 2 heads: small enough for finite differences.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            max_len: 64,
            ..ModelConfig::new(8, 2, 2, vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("model: {msg}")));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.ffn_multiplier == 0 || self.vocab_size == 0 {
            return bad("ffn_multiplier and vocab_size must be positive".into());
        }
        if !(3..=MAX_LEN).contains(&self.max_len) {
            return bad(format!("max_len {} outside 3..={MAX_LEN}", self.max_len));
        }
        if !(0.0..1.0).contains(&self.hidden_dropout) {
            return bad(format!("hidden_dropout {} outside [0, 1)", self.hidden_dropout));
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return bad(format!("layer_norm_eps {} must be positive", self.layer_norm_eps));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TaskHead {
    pub spec: TaskSpec,
    pub head: HeadParams,
}

/// Output of one example's forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Output {
    /// Class distribution.
    Distribution(Var),
    /// Scalar similarity score.
    Score(Var),
    /// One relevance per candidate, as a vector.
    Relevances(Var),
}

/// Eval-mode prediction as plain values.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Class { class: usize, probs: Vec<f64> },
    Score(f64),
    Ranking { order: Vec<usize>, scores: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct MtDnn {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub tasks: Vec<TaskHead>,
}

pub fn head_prefix(task_name: &str) -> String {
    format!("task.{task_name}")
}

impl MtDnn {
    /// Encoder first, then heads in task order, all from the seed's init stream.
    pub fn new(config: ModelConfig, specs: &[TaskSpec], seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Purpose::Init);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&mut store, &config, &mut rng)?;
        let mut model = MtDnn {
            config,
            store,
            encoder,
            tasks: Vec::with_capacity(specs.len()),
        };
        for spec in specs {
            model.add_task(spec.clone(), &mut rng)?;
        }
        Ok(model)
    }

    /// Registers a freshly initialized head for `spec`.
    pub fn add_task<R: Rng + ?Sized>(&mut self, spec: TaskSpec, rng: &mut R) -> Result<usize> {
        spec.validate()?;
        if self.task_index(&spec.name).is_some() {
            return Err(Error::Config(format!("task {} is registered twice", spec.name)));
        }
        let d = self.config.d_model;
        let prefix = head_prefix(&spec.name);
        let store = &mut self.store;
        let head = match spec.kind {
            TaskKind::Single => HeadParams::classification(store, &prefix, d, spec.n_labels(), rng)?,
            TaskKind::Pair => HeadParams::san(
                store,
                &prefix,
                d,
                spec.n_labels(),
                spec.san_steps,
                spec.prediction_dropout,
                rng,
            )?,
            TaskKind::Regression => HeadParams::similarity(store, &prefix, d, rng)?,
            TaskKind::Ranking => HeadParams::ranking(store, &prefix, d, rng)?,
        };
        self.tasks.push(TaskHead { spec, head });
        Ok(self.tasks.len() - 1)
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.spec.name == name)
    }

    pub fn task(&self, index: usize) -> Result<&TaskHead> {
        self.tasks
            .get(index)
            .ok_or_else(|| Error::Index(format!("task {index} out of range for {} tasks", self.tasks.len())))
    }

    /// Encodes `input` and returns the head's input: the `[CLS]` vector, or the
    /// (premise, hypothesis) memories for the answer module.
    fn features<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        input: &PackedInput,
        dropout: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let out = encode(g, input, &self.encoder, training, rng)?;
        g.dropout(out.hidden, dropout, training, rng)
    }

    fn cls_features<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        input: &PackedInput,
        dropout: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let out = encode(g, input, &self.encoder, training, rng)?;
        let cls = cls_vector(g, out.hidden)?;
        g.dropout(cls, dropout, training, rng)
    }

    /// Forward pass of one encoded example through the encoder and task head.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        task: usize,
        example: &EncodedExample,
        training: bool,
        rng: &mut R,
    ) -> Result<Output> {
        let TaskHead { spec, head } = self.task(task)?;
        let single_input = || match example.inputs.as_slice() {
            [input] => Ok(input),
            other => Err(Error::Input(format!(
                "task {} expects one packed input, got {}",
                spec.name,
                other.len()
            ))),
        };
        match head {
            HeadParams::Classification(h) => {
                let x = self.cls_features(g, single_input()?, spec.dropout, training, rng)?;
                Ok(Output::Distribution(classify_single(g, x, h)?))
            }
            HeadParams::Similarity(h) => {
                let x = self.cls_features(g, single_input()?, spec.dropout, training, rng)?;
                Ok(Output::Score(similarity(g, x, h)?))
            }
            HeadParams::SanPairwise(h) => {
                let input = single_input()?;
                let split = input.second_segment_start().ok_or_else(|| {
                    Error::Input(format!("task {} needs a sentence pair", spec.name))
                })?;
                let memory = self.features(g, input, spec.dropout, training, rng)?;
                let premise = g.slice(memory, 0, 0, split)?;
                let hypothesis = g.slice(memory, 0, split, input.len())?;
                let (probs, _) = san_forward(g, premise, hypothesis, h, training, rng)?;
                Ok(Output::Distribution(probs))
            }
            HeadParams::Ranking(h) => {
                if example.inputs.is_empty() {
                    return Err(Error::Input(format!("task {}: query without candidates", spec.name)));
                }
                let mut scores = Vec::with_capacity(example.inputs.len());
                for input in &example.inputs {
                    let x = self.cls_features(g, input, spec.dropout, training, rng)?;
                    let rel = relevance(g, x, h)?;
                    scores.push(g.reshape(rel, &[1])?);
                }
                let rels = if scores.len() == 1 { scores[0] } else { g.concat(&scores, 0)? };
                Ok(Output::Relevances(rels))
            }
        }
    }

    /// Mean loss of a single-task batch, chosen by the task's kind.
    pub fn batch_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        task: usize,
        batch: &[&EncodedExample],
        gamma: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<LossValue> {
        let spec = &self.task(task)?.spec;
        let mut outputs = Vec::with_capacity(batch.len());
        for ex in batch {
            outputs.push(match self.forward(g, task, ex, training, rng)? {
                Output::Distribution(v) | Output::Score(v) | Output::Relevances(v) => v,
            });
        }
        let mismatch = |t: &Target| Error::Input(format!("task {} cannot train on target {t:?}", spec.name));
        match spec.kind {
            TaskKind::Single | TaskKind::Pair => {
                let targets = batch
                    .iter()
                    .map(|ex| match ex.target {
                        Target::Class(c) => Ok(c),
                        ref t => Err(mismatch(t)),
                    })
                    .collect::<Result<Vec<_>>>()?;
                cross_entropy(g, &outputs, &targets, &spec.name)
            }
            TaskKind::Regression => {
                let targets = batch
                    .iter()
                    .map(|ex| match ex.target {
                        Target::Score(y) => Ok(y),
                        ref t => Err(mismatch(t)),
                    })
                    .collect::<Result<Vec<_>>>()?;
                mse(g, &outputs, &targets, &spec.name)
            }
            TaskKind::Ranking => {
                let flags = batch
                    .iter()
                    .map(|ex| match &ex.target {
                        Target::Ranking(f) => Ok(f.clone()),
                        t => Err(mismatch(t)),
                    })
                    .collect::<Result<Vec<_>>>()?;
                ranking_nll(g, &outputs, &flags, gamma, &spec.name)
            }
        }
    }

    /// Eval-mode prediction for one example; dropout is off, so no randomness.
    pub fn predict(&self, task: usize, example: &EncodedExample) -> Result<Prediction> {
        let mut g = Graph::with_params(&self.store);
        let mut unused = stream(0, Purpose::Dropout);
        let output = self.forward(&mut g, task, example, false, &mut unused)?;
        Ok(match output {
            Output::Distribution(v) => {
                let probs = g.value(v).data().to_vec();
                let class = order_by_score(&probs)?[0];
                Prediction::Class { class, probs }
            }
            Output::Score(v) => Prediction::Score(g.value(v).item()?),
            Output::Relevances(v) => {
                let scores = g.value(v).data().to_vec();
                Prediction::Ranking {
                    order: order_by_score(&scores)?,
                    scores,
                }
            }
        })
    }

    /// Candidates of one query ordered by descending relevance; ties keep input order.
    pub fn rank_candidates(&self, task: usize, candidates: &[PackedInput]) -> Result<Vec<usize>> {
        if candidates.is_empty() {
            return Err(Error::Input("no candidates to rank".into()));
        }
        if !matches!(self.task(task)?.head, HeadParams::Ranking(_)) {
            return Err(Error::Config(format!("task {} is not a ranking task", self.tasks[task].spec.name)));
        }
        let example = EncodedExample {
            inputs: candidates.to_vec(),
            target: Target::Ranking(vec![false; candidates.len()]),
        };
        match self.predict(task, &example)? {
            Prediction::Ranking { order, .. } => Ok(order),
            _ => unreachable!("ranking heads produce rankings"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::SpecialIds;

    const SPECIAL: SpecialIds = SpecialIds { cls: 2, sep: 3 };

    fn specs() -> Vec<TaskSpec> {
        vec![
            TaskSpec::new("sst", TaskKind::Single),
            TaskSpec::new("mnli", TaskKind::Pair).with_san(3, 0.1),
            TaskSpec::new("sts", TaskKind::Regression),
            TaskSpec::new("qnli", TaskKind::Ranking),
        ]
    }

    #[test]
    fn config_validation() {
        ModelConfig::tiny(20).validate().unwrap();
        let mut c = ModelConfig::tiny(20);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c = ModelConfig::tiny(20);
        c.max_len = 600;
        assert!(c.validate().is_err());
        c = ModelConfig::tiny(20);
        c.n_layers = 0;
        c.validate().unwrap();
    }

    #[test]
    fn every_head_produces_its_output_kind() {
        let model = MtDnn::new(ModelConfig::tiny(20), &specs(), 7).unwrap();
        let pair = pack_pair(&[5, 6], &[7]);
        let class = EncodedExample {
            inputs: vec![pair.clone()],
            target: Target::Class(1),
        };
        let Prediction::Class { probs, .. } = model.predict(0, &class).unwrap() else { panic!() };
        assert_eq!(probs.len(), 2);
        let Prediction::Class { probs, .. } = model.predict(1, &class).unwrap() else { panic!() };
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!(matches!(model.predict(2, &class).unwrap(), Prediction::Score(_)));
        let order = model.rank_candidates(3, &[pair.clone(), pack_pair(&[5, 6], &[8])]).unwrap();
        assert_eq!(order.len(), 2);
        assert!(model.rank_candidates(3, &[]).is_err());
    }

    #[test]
    fn identical_candidates_keep_input_order() {
        let model = MtDnn::new(ModelConfig::tiny(20), &specs(), 1).unwrap();
        let c = pack_pair(&[5], &[6, 7]);
        assert_eq!(model.rank_candidates(3, &[c.clone(), c]).unwrap(), [0, 1]);
    }

    #[test]
    fn pair_head_rejects_single_sentence() {
        let model = MtDnn::new(ModelConfig::tiny(20), &specs(), 1).unwrap();
        let single = crate::encoder::pack(&[5, 6], None, 64, SPECIAL).unwrap();
        let ex = EncodedExample {
            inputs: vec![single],
            target: Target::Class(0),
        };
        assert!(matches!(model.predict(1, &ex), Err(Error::Input(_))));
    }

    #[test]
    fn duplicate_task_names_are_rejected() {
        let twice = [TaskSpec::new("a", TaskKind::Single), TaskSpec::new("a", TaskKind::Pair)];
        assert!(MtDnn::new(ModelConfig::tiny(20), &twice, 0).is_err());
    }

    fn pack_pair(a: &[usize], b: &[usize]) -> PackedInput {
        crate::encoder::pack(a, Some(b), 64, SPECIAL).unwrap()
    }
}
