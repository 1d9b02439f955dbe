//! Fine-tune a jointly trained encoder on a small new task and compare with
//! training the same task from random initialization.

use std::ops::ControlFlow;

use mtdnn::checkpoint::Checkpoint;
use mtdnn::data::{encode_split, make_synthetic_with, EncodedExample, SyntheticOptions, Vocabulary};
use mtdnn::metrics::evaluate;
use mtdnn::rng::{stream, Purpose};
use mtdnn::trainer::{fine_tune, run_training, Quiet, StepRecord, TaskData, TrainConfig};
use mtdnn::{Metric, ModelConfig, MtDnn, TaskKind, TaskSpec};

fn data(vocab: &Vocabulary, size: usize, markers: Vec<usize>, seed: u64) -> mtdnn::Result<Vec<EncodedExample>> {
    let options = SyntheticOptions { markers, ..SyntheticOptions::default() };
    let split = make_synthetic_with(TaskKind::Single, size, vocab.len(), &options, &mut stream(seed, Purpose::Sampling))?;
    encode_split(&split, vocab, 32)
}

/// Stops training at the first step with 90% train accuracy and records it.
fn until_90<'a>(
    examples: &'a [EncodedExample],
    reached: &'a mut Option<u64>,
) -> impl FnMut(&StepRecord, &MtDnn) -> ControlFlow<()> + 'a {
    move |r, m| {
        let acc = evaluate(m, 0, examples).ok().and_then(|e| e.get(Metric::Accuracy)).unwrap_or(0.0);
        if acc >= 0.9 {
            *reached = Some(r.step);
            return ControlFlow::Break(());
        }
        ControlFlow::Continue(())
    }
}

fn main() -> mtdnn::Result<()> {
    let vocab = Vocabulary::synthetic(100)?;
    let config = ModelConfig { max_len: 32, ..ModelConfig::new(32, 2, 2, vocab.len()) };
    let seed = 1;

    let specs = [TaskSpec::new("a", TaskKind::Single), TaskSpec::new("b", TaskKind::Single)];
    let mut joint = MtDnn::new(config.clone(), &specs, seed)?;
    let tasks = [
        TaskData { task: 0, examples: data(&vocab, 64, vec![0], 10)? },
        TaskData { task: 1, examples: data(&vocab, 64, vec![1], 11)? },
    ];
    let pretrain = TrainConfig { lr_peak: 1e-3, batch_size: 32, epochs: 150, seed, ..TrainConfig::default() };
    run_training(&mut joint, &tasks, &pretrain, &mut Quiet)?;
    let checkpoint = Checkpoint::from_params(&joint.store)?;

    let held_out = data(&vocab, 16, vec![0, 1], 12)?;
    let spec = TaskSpec::new("c", TaskKind::Single);
    let tune = TrainConfig { lr_peak: 1e-3, batch_size: 8, epochs: 100, seed, ..TrainConfig::default() };
    let mut from_joint = None;
    fine_tune(&checkpoint, config.clone(), spec.clone(), held_out.clone(), &tune, &mut until_90(&held_out, &mut from_joint))?;
    let mut from_scratch = None;
    let mut scratch = MtDnn::new(config, &[spec], seed)?;
    run_training(&mut scratch, &[TaskData { task: 0, examples: held_out.clone() }], &tune, &mut until_90(&held_out, &mut from_scratch))?;
    println!("steps to 90% train accuracy: fine-tuned {from_joint:?}, from scratch {from_scratch:?}");
    Ok(())
}
