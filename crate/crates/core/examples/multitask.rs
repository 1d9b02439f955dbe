//! Joint training of all four task kinds over one shared encoder.

use mtdnn::data::{encode_split, make_synthetic, Vocabulary};
use mtdnn::metrics::evaluate;
use mtdnn::rng::{stream, Purpose};
use mtdnn::trainer::{run_training, Quiet, TaskData, TrainConfig};
use mtdnn::{ModelConfig, MtDnn, TaskKind, TaskSpec};

fn main() -> mtdnn::Result<()> {
    let vocab = Vocabulary::synthetic(100)?;
    let tasks = [
        ("sst", TaskKind::Single, 48),
        ("nli", TaskKind::Pair, 48),
        ("sts", TaskKind::Regression, 48),
        ("qnli", TaskKind::Ranking, 24),
    ];
    let specs: Vec<TaskSpec> = tasks.iter().map(|&(name, kind, _)| TaskSpec::new(name, kind)).collect();
    let mut data = Vec::new();
    for (i, &(_, kind, size)) in tasks.iter().enumerate() {
        let split = make_synthetic(kind, size, vocab.len(), &mut stream(i as u64, Purpose::Sampling))?;
        data.push(TaskData { task: i, examples: encode_split(&split, &vocab, 32)? });
    }

    let config = ModelConfig { max_len: 32, ..ModelConfig::new(32, 2, 2, vocab.len()) };
    let mut model = MtDnn::new(config, &specs, 7)?;
    let train = TrainConfig { lr_peak: 1e-3, batch_size: 16, epochs: 20, seed: 7, ..TrainConfig::default() };
    let log = run_training(&mut model, &data, &train, &mut Quiet)?;
    println!("{} steps; last: {}", log.records.len(), log.records.last().map(|r| r.log_line()).unwrap_or_default());

    for d in &data {
        print!("{}", evaluate(&model, d.task, &d.examples)?.to_tsv());
    }
    Ok(())
}
