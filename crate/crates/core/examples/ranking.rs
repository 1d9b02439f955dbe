//! Train a relevance ranker on synthetic queries and rank a query's candidates.

use mtdnn::data::{encode_split, make_synthetic_with, Example, SyntheticOptions, Vocabulary};
use mtdnn::metrics::evaluate;
use mtdnn::rng::{stream, Purpose};
use mtdnn::trainer::{run_training, Quiet, TaskData, TrainConfig};
use mtdnn::{Metric, ModelConfig, MtDnn, TaskKind, TaskSpec};

fn main() -> mtdnn::Result<()> {
    let vocab = Vocabulary::synthetic(100)?;
    let options = SyntheticOptions { markers: (0..8).collect(), ..SyntheticOptions::default() };
    let split = make_synthetic_with(TaskKind::Ranking, 64, vocab.len(), &options, &mut stream(2, Purpose::Sampling))?;
    let examples = encode_split(&split, &vocab, 32)?;

    let config = ModelConfig { max_len: 32, ..ModelConfig::new(32, 2, 2, vocab.len()) };
    let mut model = MtDnn::new(config, &[TaskSpec::new("qnli", TaskKind::Ranking)], 1)?;
    let train = TrainConfig { lr_peak: 1e-3, batch_size: 16, epochs: 40, seed: 1, ..TrainConfig::default() };
    run_training(&mut model, &[TaskData { task: 0, examples: examples.clone() }], &train, &mut Quiet)?;
    println!("positive ranked first: {:?}", evaluate(&model, 0, &examples)?.get(Metric::Accuracy));

    if let Example::Ranking { query, candidates, .. } = &split.examples[0] {
        let order = model.rank_candidates(0, &examples[0].inputs)?;
        println!("query: {query}");
        for i in order {
            let c = &candidates[i];
            println!("  {} {}", if c.positive { "+" } else { "-" }, c.text);
        }
    }
    Ok(())
}
