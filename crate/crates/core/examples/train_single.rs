//! Overfit a 64-example synthetic sentiment-style task.

use std::ops::ControlFlow;

use mtdnn::data::{encode_split, make_synthetic, Vocabulary};
use mtdnn::metrics::evaluate;
use mtdnn::rng::{stream, Purpose};
use mtdnn::trainer::{run_training, StepRecord, TaskData, TrainConfig};
use mtdnn::{Metric, ModelConfig, MtDnn, TaskKind, TaskSpec};

fn main() -> mtdnn::Result<()> {
    let vocab = Vocabulary::synthetic(100)?;
    let split = make_synthetic(TaskKind::Single, 64, vocab.len(), &mut stream(1, Purpose::Sampling))?;
    let examples = encode_split(&split, &vocab, 32)?;

    let config = ModelConfig { max_len: 32, ..ModelConfig::new(32, 2, 2, vocab.len()) };
    let mut model = MtDnn::new(config, &[TaskSpec::new("sst", TaskKind::Single)], 1)?;
    let train = TrainConfig { lr_peak: 1e-3, batch_size: 32, epochs: 150, seed: 1, ..TrainConfig::default() };

    let mut print = |r: &StepRecord, _: &MtDnn| {
        if r.step.is_multiple_of(50) {
            println!("{}", r.log_line());
        }
        ControlFlow::Continue(())
    };
    run_training(&mut model, &[TaskData { task: 0, examples: examples.clone() }], &train, &mut print)?;
    let report = evaluate(&model, 0, &examples)?;
    println!("train accuracy: {:?}", report.get(Metric::Accuracy));
    Ok(())
}
