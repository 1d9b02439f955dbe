//! Save a checkpoint at every epoch, then resume from the first one and land
//! on exactly the same parameters as an uninterrupted run.

use mtdnn::checkpoint::Checkpoint;
use mtdnn::data::{encode_split, make_synthetic, Vocabulary};
use mtdnn::rng::{stream, Purpose};
use mtdnn::trainer::{resume_training, run_training, EpochCheckpoints, Quiet, TaskData, TrainConfig, TrainerState};
use mtdnn::{ModelConfig, MtDnn, TaskKind, TaskSpec};

fn main() -> mtdnn::Result<()> {
    let vocab = Vocabulary::synthetic(100)?;
    let split = make_synthetic(TaskKind::Single, 24, vocab.len(), &mut stream(0, Purpose::Sampling))?;
    let data = [TaskData { task: 0, examples: encode_split(&split, &vocab, 32)? }];
    let config = ModelConfig { max_len: 32, ..ModelConfig::tiny(vocab.len()) };
    let spec = [TaskSpec::new("sst", TaskKind::Single)];
    let train = TrainConfig { lr_peak: 1e-3, batch_size: 8, epochs: 3, seed: 5, ..TrainConfig::default() };

    let dir = std::env::temp_dir().join("mtdnn-checkpoint-example");
    std::fs::create_dir_all(&dir).map_err(|e| mtdnn::Error::io(&dir, e))?;
    let mut full = MtDnn::new(config.clone(), &spec, 5)?;
    run_training(&mut full, &data, &train, &mut EpochCheckpoints { dir: &dir })?;

    let ck = Checkpoint::load(dir.join("epoch1.ckpt"))?;
    let mut resumed = MtDnn::new(config, &spec, 999)?;
    ck.restore(&mut resumed.store, "")?;
    let mut state = TrainerState::read_from(&ck, &resumed.store)?;
    println!("resuming after epoch {} at step {}", state.epoch, state.step);
    let rest = resume_training(&mut resumed, &data, &train, &mut state, &mut Quiet)?;
    println!("{} more steps", rest.records.len());

    let same = full.store.iter().zip(resumed.store.iter()).all(|((_, a), (_, b))| a.value == b.value);
    println!("identical to the uninterrupted run: {same}");
    Ok(())
}
