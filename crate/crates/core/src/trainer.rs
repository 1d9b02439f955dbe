//! Multi-task training: per-epoch batch plans over the merged task data,
//! Adamax updates under a warmup-linear schedule, gradient clipping,
//! checkpoints and fine-tuning.

use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::EncodedExample;
use crate::encoder::PARAM_PREFIX;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MtDnn};
use crate::numfmt::g17;
use crate::params::ParamStore;
use crate::rng::{stream, Purpose, StreamState};
use crate::task::TaskSpec;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adamax,
    /// Plain `theta -= lr * g`.
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub adamax_beta1: f64,
    pub adamax_beta2: f64,
    pub adamax_eps: f64,
    /// Scale on relevance scores inside the ranking softmax.
    pub gamma: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 5e-5,
            batch_size: 32,
            epochs: 5,
            warmup_fraction: 0.1,
            clip_norm: 1.0,
            adamax_beta1: 0.9,
            adamax_beta2: 0.999,
            adamax_eps: 1e-8,
            gamma: 1.0,
            seed: 0,
            optimizer: Optimizer::Adamax,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("training: {msg}")));
        let positive = [
            ("lr_peak", self.lr_peak),
            ("clip_norm", self.clip_norm),
            ("adamax_eps", self.adamax_eps),
            ("gamma", self.gamma),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("adamax_beta1", self.adamax_beta1), ("adamax_beta2", self.adamax_beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `lr_peak` over the first `warmup_fraction` of
/// `total_steps`, then linear decay to 0 at `total_steps`. The warmup length
/// is rounded to a whole number of steps so the peak lands on a step.
pub fn lr_at(step: u64, total_steps: u64, config: &TrainConfig) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    let total = total_steps as f64;
    let step = step as f64;
    let mut warm = (config.warmup_fraction * total).round();
    if config.warmup_fraction > 0.0 {
        warm = warm.max(1.0);
    }
    if step < warm {
        config.lr_peak * (step / warm)
    } else {
        config.lr_peak * ((total - step) / (total - warm))
    }
}

/// Rescales all gradients so their global L2 norm is at most `clip_norm`.
/// Returns the factor applied (1 when already within bounds).
pub fn clip_gradients(store: &mut ParamStore, clip_norm: f64) -> Result<f64> {
    let norm = store.grad_norm();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm <= clip_norm {
        return Ok(1.0);
    }
    let scale = clip_norm / norm;
    for p in store.iter_mut() {
        for g in p.grad.data_mut() {
            *g *= scale;
        }
    }
    Ok(scale)
}

/// One mini-batch: example ids of a single task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Position of the task in the list passed to [`pack_epoch`].
    pub task: usize,
    pub ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub batches: Vec<Batch>,
}

impl EpochPlan {
    pub fn batch_counts(&self, n_tasks: usize) -> Vec<usize> {
        let mut counts = vec![0; n_tasks];
        for b in &self.batches {
            counts[b.task] += 1;
        }
        counts
    }
}

pub fn batches_per_epoch(sizes: &[usize], batch_size: usize) -> u64 {
    sizes.iter().map(|&n| n.div_ceil(batch_size) as u64).sum()
}

/// Shuffles each task's ids, cuts them into batches (the last may be
/// short), then shuffles the merged batch list.
pub fn pack_epoch<R: Rng + ?Sized>(sizes: &[usize], batch_size: usize, rng: &mut R) -> Result<EpochPlan> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut batches = Vec::new();
    for (task, &n) in sizes.iter().enumerate() {
        if n == 0 {
            return Err(Error::Config(format!("task {task} has no training examples")));
        }
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(rng);
        batches.extend(ids.chunks(batch_size).map(|c| Batch { task, ids: c.to_vec() }));
    }
    batches.shuffle(rng);
    Ok(EpochPlan { batches })
}

/// Training examples of one model task.
#[derive(Debug, Clone)]
pub struct TaskData {
    /// Index into `MtDnn::tasks`.
    pub task: usize,
    pub examples: Vec<EncodedExample>,
}

/// Optimizer moments, counters and random streams: everything besides the
/// parameters needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    pub first_moment: Vec<Tensor>,
    pub inf_norm: Vec<Tensor>,
    dropout_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
}

const COUNTERS: &str = "trainer.counters";
const DROPOUT_STREAM: &str = "trainer.rng.dropout";
const SHUFFLE_STREAM: &str = "trainer.rng.shuffle";

fn halves(v: u64) -> [f64; 2] {
    [(v & 0xffff_ffff) as f64, (v >> 32) as f64]
}

fn from_halves(lo: f64, hi: f64) -> Result<u64> {
    let part = |x: f64| {
        if x.fract() == 0.0 && (0.0..4_294_967_296.0).contains(&x) {
            Ok(x as u64)
        } else {
            Err(Error::Checkpoint(format!("corrupt counter word {x}")))
        }
    };
    Ok(part(lo)? | (part(hi)? << 32))
}

impl TrainerState {
    pub fn new(store: &ParamStore, seed: u64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        TrainerState {
            step: 0,
            epoch: 0,
            seed,
            first_moment: zeros(),
            inf_norm: zeros(),
            dropout_rng: stream(seed, Purpose::Dropout),
            shuffle_rng: stream(seed, Purpose::Shuffle),
        }
    }

    fn check_against(&self, store: &ParamStore) -> Result<()> {
        let consistent = self.first_moment.len() == store.len()
            && self.inf_norm.len() == store.len()
            && store.iter().all(|(id, p)| {
                self.first_moment[id.index()].shape() == p.value.shape()
                    && self.inf_norm[id.index()].shape() == p.value.shape()
            });
        if consistent {
            Ok(())
        } else {
            Err(Error::Contract("optimizer state does not match the model parameters".into()))
        }
    }

    /// Appends this state to `ck` under `optim.*` and `trainer.*` names.
    pub fn write_to(&self, store: &ParamStore, ck: &mut Checkpoint) -> Result<()> {
        self.check_against(store)?;
        for (id, p) in store.iter() {
            ck.push(format!("optim.m.{}", p.name), self.first_moment[id.index()].clone())?;
            ck.push(format!("optim.u.{}", p.name), self.inf_norm[id.index()].clone())?;
        }
        let counters = [halves(self.step), halves(self.epoch), halves(self.seed)].concat();
        ck.push(COUNTERS, Tensor::vector(counters))?;
        for (name, rng) in [(DROPOUT_STREAM, &self.dropout_rng), (SHUFFLE_STREAM, &self.shuffle_rng)] {
            let pos = rng.get_word_pos();
            let words = [halves(pos as u64), halves((pos >> 64) as u64)].concat();
            ck.push(name, Tensor::vector(words))?;
        }
        Ok(())
    }

    pub fn read_from(ck: &Checkpoint, store: &ParamStore) -> Result<Self> {
        let entry = |name: &str, len: Option<usize>| {
            let t = ck
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {name}")))?;
            match len {
                Some(n) if t.shape() != [n] => Err(Error::Checkpoint(format!("{name} has shape {:?}", t.shape()))),
                _ => Ok(t),
            }
        };
        let mut first_moment = Vec::with_capacity(store.len());
        let mut inf_norm = Vec::with_capacity(store.len());
        for (_, p) in store.iter() {
            for (prefix, out) in [("optim.m.", &mut first_moment), ("optim.u.", &mut inf_norm)] {
                let name = format!("{prefix}{}", p.name);
                let t = entry(&name, None)?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{name} has shape {:?}, parameter has {:?}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
                out.push(t.clone());
            }
        }
        let c = entry(COUNTERS, Some(6))?.data();
        let seed = from_halves(c[4], c[5])?;
        let stream_at = |name: &str, purpose: Purpose| -> Result<ChaCha8Rng> {
            let w = entry(name, Some(4))?.data();
            let word_pos = u128::from(from_halves(w[0], w[1])?) | (u128::from(from_halves(w[2], w[3])?) << 64);
            Ok(StreamState { seed, purpose, word_pos }.restore())
        };
        Ok(TrainerState {
            step: from_halves(c[0], c[1])?,
            epoch: from_halves(c[2], c[3])?,
            seed,
            first_moment,
            inf_norm,
            dropout_rng: stream_at(DROPOUT_STREAM, Purpose::Dropout)?,
            shuffle_rng: stream_at(SHUFFLE_STREAM, Purpose::Shuffle)?,
        })
    }
}

/// Parameters plus, when given, the trainer state needed to resume.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &MtDnn, state: Option<&TrainerState>) -> Result<()> {
    let mut ck = Checkpoint::from_params(&model.store)?;
    if let Some(state) = state {
        state.write_to(&model.store, &mut ck)?;
    }
    ck.save(path)
}

/// One optimizer step as it appears in the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based epoch.
    pub epoch: u64,
    /// 1-based global step.
    pub step: u64,
    pub task: String,
    pub loss: f64,
    pub lr: f64,
}

impl StepRecord {
    /// `epoch, step, task, loss, lr`, tab-separated, numbers in `%.17g` form.
    pub fn log_line(&self) -> String {
        format!("{}\t{}\t{}\t{}\t{}", self.epoch, self.step, self.task, g17(self.loss), g17(self.lr))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
    /// False when an observer stopped the run early.
    pub completed: bool,
}

impl TrainingLog {
    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| r.log_line() + "\n").collect()
    }
}

/// Forward, backward, clip and update on one single-task batch.
///
/// Parameters not reached by the batch (other tasks' heads) are left alone.
/// Any error leaves the parameters unchanged.
pub fn train_step(
    model: &mut MtDnn,
    state: &mut TrainerState,
    config: &TrainConfig,
    total_steps: u64,
    task: usize,
    batch: &[&EncodedExample],
) -> Result<StepRecord> {
    state.check_against(&model.store)?;
    let lr = lr_at(state.step, total_steps, config);
    model.store.zero_grads();
    let (loss, task_name, grads) = {
        let mut g = Graph::with_params(&model.store);
        let loss = model.batch_loss(&mut g, task, batch, config.gamma, true, &mut state.dropout_rng)?;
        let value = g.value(loss.value).item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("task {}: loss is {value}", loss.task_name)));
        }
        let grads = g.backward(loss.value)?;
        (value, loss.task_name, grads)
    };
    let mut touched = vec![false; model.store.len()];
    for (id, _) in grads.params() {
        touched[id.index()] = true;
    }
    model.store.accumulate(&grads);
    clip_gradients(&mut model.store, config.clip_norm)?;
    apply_update(&mut model.store, state, config, lr, &touched);
    state.step += 1;
    Ok(StepRecord {
        epoch: state.epoch + 1,
        step: state.step,
        task: task_name,
        loss,
        lr,
    })
}

fn apply_update(store: &mut ParamStore, state: &mut TrainerState, config: &TrainConfig, lr: f64, touched: &[bool]) {
    let t = state.step + 1;
    let (b1, b2, eps) = (config.adamax_beta1, config.adamax_beta2, config.adamax_eps);
    let step_size = lr / (1.0 - b1.powi(t.min(i32::MAX as u64) as i32));
    for (i, p) in store.iter_mut().enumerate() {
        if !touched[i] {
            continue;
        }
        let grad = p.grad.data();
        let theta = p.value.data_mut();
        match config.optimizer {
            Optimizer::Sgd => {
                for (w, g) in theta.iter_mut().zip(grad) {
                    *w -= lr * g;
                }
            }
            Optimizer::Adamax => {
                let m = state.first_moment[i].data_mut();
                let u = state.inf_norm[i].data_mut();
                for j in 0..theta.len() {
                    m[j] = b1 * m[j] + (1.0 - b1) * grad[j];
                    u[j] = (b2 * u[j]).max(grad[j].abs());
                    theta[j] -= step_size * m[j] / (u[j] + eps);
                }
            }
        }
    }
}

/// Hooks into a training run.
pub trait Observer {
    /// Called after every step; `Break` ends the run early.
    fn on_step(&mut self, _record: &StepRecord, _model: &MtDnn) -> Result<ControlFlow<()>> {
        Ok(ControlFlow::Continue(()))
    }

    /// Called after each completed epoch with the 1-based epoch number.
    fn on_epoch_end(&mut self, _epoch: u64, _model: &MtDnn, _state: &TrainerState) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct Quiet;

impl Observer for Quiet {}

impl<F: FnMut(&StepRecord, &MtDnn) -> ControlFlow<()>> Observer for F {
    fn on_step(&mut self, record: &StepRecord, model: &MtDnn) -> Result<ControlFlow<()>> {
        Ok(self(record, model))
    }
}

/// Saves `epoch{N}.ckpt` (parameters and trainer state) into a directory at
/// the end of every epoch.
pub struct EpochCheckpoints<'a> {
    pub dir: &'a Path,
}

impl Observer for EpochCheckpoints<'_> {
    fn on_epoch_end(&mut self, epoch: u64, model: &MtDnn, state: &TrainerState) -> Result<()> {
        save_checkpoint(self.dir.join(format!("epoch{epoch}.ckpt")), model, Some(state))
    }
}

/// Trains from a fresh [`TrainerState`] seeded by `config.seed`.
pub fn run_training(
    model: &mut MtDnn,
    data: &[TaskData],
    config: &TrainConfig,
    observer: &mut dyn Observer,
) -> Result<TrainingLog> {
    let mut state = TrainerState::new(&model.store, config.seed);
    resume_training(model, data, config, &mut state, observer)
}

/// Runs the remaining epochs `state.epoch + 1 ..= config.epochs`.
pub fn resume_training(
    model: &mut MtDnn,
    data: &[TaskData],
    config: &TrainConfig,
    state: &mut TrainerState,
    observer: &mut dyn Observer,
) -> Result<TrainingLog> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("no tasks to train".into()));
    }
    for d in data {
        let spec = &model.task(d.task)?.spec;
        if d.examples.is_empty() {
            return Err(Error::Config(format!("task {} has no training examples", spec.name)));
        }
    }
    let sizes: Vec<usize> = data.iter().map(|d| d.examples.len()).collect();
    let total_steps = config.epochs * batches_per_epoch(&sizes, config.batch_size);
    let mut log = TrainingLog::default();
    while state.epoch < config.epochs {
        let plan = pack_epoch(&sizes, config.batch_size, &mut state.shuffle_rng)?;
        for batch in &plan.batches {
            let set = &data[batch.task];
            let examples: Vec<&EncodedExample> = batch.ids.iter().map(|&i| &set.examples[i]).collect();
            let record = train_step(model, state, config, total_steps, set.task, &examples)
                .map_err(|e| e.in_context(format!("epoch {} step {}", state.epoch + 1, state.step + 1)))?;
            let flow = observer.on_step(&record, model)?;
            log.records.push(record);
            if flow.is_break() {
                return Ok(log);
            }
        }
        state.epoch += 1;
        observer.on_epoch_end(state.epoch, model, state)?;
    }
    log.completed = true;
    Ok(log)
}

/// Adapts a trained encoder to a new task: loads the checkpoint's encoder
/// weights, initializes a fresh head for `spec` and trains on `examples`
/// alone.
pub fn fine_tune(
    init: &Checkpoint,
    model_config: ModelConfig,
    spec: TaskSpec,
    examples: Vec<EncodedExample>,
    config: &TrainConfig,
    observer: &mut dyn Observer,
) -> Result<(MtDnn, TrainingLog)> {
    let mut model = MtDnn::new(model_config, &[spec], config.seed)?;
    init.restore(&mut model.store, PARAM_PREFIX)?;
    let data = [TaskData { task: 0, examples }];
    let log = run_training(&mut model, &data, config, observer)?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Target;
    use crate::encoder::{pack, SpecialIds};
    use crate::task::TaskKind;

    fn config() -> TrainConfig {
        TrainConfig {
            lr_peak: 1e-3,
            batch_size: 2,
            epochs: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_breakpoints() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, 100, &c), 0.0);
        assert_eq!(lr_at(10, 100, &c), 5e-5);
        assert_eq!(lr_at(100, 100, &c), 0.0);
        assert!((lr_at(5, 100, &c) - 2.5e-5).abs() < 1e-18);
        assert!((lr_at(55, 100, &c) - 2.5e-5).abs() < 1e-18);
    }

    #[test]
    fn clipping_examples() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(vec![2])).unwrap();
        let b = store.add("b", Tensor::zeros(vec![2])).unwrap();
        store.get_mut(a).grad = Tensor::vector(vec![3.0, 0.0]);
        store.get_mut(b).grad = Tensor::vector(vec![0.0, 4.0]);
        assert_eq!(clip_gradients(&mut store, 1.0).unwrap(), 0.2);
        assert!((store.get(a).grad.data()[0] - 0.6).abs() < 1e-15);
        assert!((store.get(b).grad.data()[1] - 0.8).abs() < 1e-15);

        store.get_mut(a).grad = Tensor::vector(vec![0.3, 0.4]);
        store.get_mut(b).grad = Tensor::zeros(vec![2]);
        assert_eq!(clip_gradients(&mut store, 1.0).unwrap(), 1.0);
        assert_eq!(store.get(a).grad.data(), [0.3, 0.4]);

        store.get_mut(a).grad = Tensor::vector(vec![f64::NAN, 0.0]);
        assert!(matches!(clip_gradients(&mut store, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn adamax_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.5])).unwrap();
        store.get_mut(w).grad = Tensor::vector(vec![1.0]);
        let mut state = TrainerState::new(&store, 0);
        apply_update(&mut store, &mut state, &config(), 1e-3, &[true]);
        let moved = 0.5 - store.value(w).data()[0];
        assert!((moved - 1e-3).abs() < 1e-3 * 1e-7, "{moved}");
    }

    #[test]
    fn plan_counts_and_single_batch() {
        let mut rng = stream(3, Purpose::Shuffle);
        let plan = pack_epoch(&[10, 20], 5, &mut rng).unwrap();
        assert_eq!(plan.batches.len(), 6);
        assert_eq!(plan.batch_counts(2), [2, 4]);
        let plan = pack_epoch(&[5], 5, &mut rng).unwrap();
        assert_eq!(plan.batches.len(), 1);
        let mut ids = plan.batches[0].ids.clone();
        ids.sort();
        assert_eq!(ids, [0, 1, 2, 3, 4]);
        assert!(pack_epoch(&[3, 0], 5, &mut rng).is_err());
        let again = |s| pack_epoch(&[7, 9, 4], 3, &mut stream(s, Purpose::Shuffle)).unwrap();
        assert_eq!(again(11), again(11));
    }

    fn tiny_task() -> (MtDnn, Vec<TaskData>) {
        let model = MtDnn::new(ModelConfig::tiny(20), &[TaskSpec::new("t", TaskKind::Single)], 4).unwrap();
        let special = SpecialIds { cls: 2, sep: 3 };
        let examples = (0..4)
            .map(|i| EncodedExample {
                inputs: vec![pack(&[5 + i, 9], None, 64, special).unwrap()],
                target: Target::Class(i % 2),
            })
            .collect();
        (model, vec![TaskData { task: 0, examples }])
    }

    #[test]
    fn zero_schedule_leaves_parameters_unchanged() {
        let (mut model, data) = tiny_task();
        let before = model.store.clone();
        let c = TrainConfig {
            batch_size: 4,
            ..config()
        };
        let log = run_training(&mut model, &data, &c, &mut Quiet).unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.records[0].lr, 0.0);
        for ((_, a), (_, b)) in before.iter().zip(model.store.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn state_round_trips_through_checkpoint() {
        let (mut model, data) = tiny_task();
        let mut state = TrainerState::new(&model.store, 77);
        let c = TrainConfig { epochs: 1, ..config() };
        resume_training(&mut model, &data, &c, &mut state, &mut Quiet).unwrap();
        let mut ck = Checkpoint::from_params(&model.store).unwrap();
        state.write_to(&model.store, &mut ck).unwrap();
        let back = TrainerState::read_from(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), &model.store).unwrap();
        assert_eq!(back, state);
        assert_eq!(back.step, 2);
    }

    #[test]
    fn early_stop_and_log_format() {
        let (mut model, data) = tiny_task();
        let mut stop = |r: &StepRecord, _: &MtDnn| {
            if r.step == 1 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        };
        let log = run_training(&mut model, &data, &config(), &mut stop).unwrap();
        assert!(!log.completed);
        assert_eq!(log.records.len(), 1);
        let line = log.records[0].log_line();
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields[..3], ["1", "1", "t"]);
        assert_eq!(fields[4], "0");
    }
}
