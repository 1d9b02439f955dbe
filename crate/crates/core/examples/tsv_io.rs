//! Write a dataset and its vocabulary to disk and read them back.

use mtdnn::data::{encode_split, load_tsv, make_synthetic, write_tsv, Split, Vocabulary};
use mtdnn::rng::{stream, Purpose};
use mtdnn::{TaskKind, TaskSpec};

fn main() -> mtdnn::Result<()> {
    let dir = std::env::temp_dir().join("mtdnn-tsv-example");
    std::fs::create_dir_all(&dir).map_err(|e| mtdnn::Error::io(&dir, e))?;

    let vocab = Vocabulary::synthetic(60)?;
    vocab.save(dir.join("vocab.txt"))?;
    let spec = TaskSpec::new("qnli", TaskKind::Ranking);
    let split = make_synthetic(TaskKind::Ranking, 3, vocab.len(), &mut stream(1, Purpose::Sampling))?;
    let path = dir.join("qnli.tsv");
    write_tsv(&path, &split, &spec)?;
    print!("{}", std::fs::read_to_string(&path).map_err(|e| mtdnn::Error::io(&path, e))?);

    let loaded = load_tsv(&path, &spec, Split::Train)?;
    let vocab = Vocabulary::load(dir.join("vocab.txt"))?;
    let encoded = encode_split(&loaded, &vocab, 32)?;
    println!("round trip equal: {}", loaded.examples == split.examples);
    println!("first query packs into {} candidate inputs of {} tokens", encoded[0].inputs.len(), encoded[0].inputs[0].len());
    Ok(())
}
