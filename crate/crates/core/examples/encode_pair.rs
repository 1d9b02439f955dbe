//! Tokenize and pack a sentence pair, then run it through a small encoder.

use mtdnn::data::Vocabulary;
use mtdnn::encoder::{cls_vector, encode, pack, EncoderParams};
use mtdnn::rng::{stream, Purpose};
use mtdnn::{Graph, ModelConfig, ParamStore};

fn main() -> mtdnn::Result<()> {
    let vocab = Vocabulary::from_tokens(
        ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "the", "cat", "sat", "on", "mat", "##s", "a"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    )?;
    let a = vocab.tokenize("the cat sat on the mat");
    let b = vocab.tokenize("a cats sat");
    let input = pack(&a, Some(&b), 32, vocab.special_ids())?;
    println!("tokens   {:?}", input.token_ids);
    println!("segments {:?}", input.segment_ids);

    let config = ModelConfig { max_len: 32, ..ModelConfig::new(16, 2, 2, vocab.len()) };
    let mut store = ParamStore::new();
    let params = EncoderParams::init(&mut store, &config, &mut stream(0, Purpose::Init))?;
    let mut g = Graph::with_params(&store);
    let out = encode(&mut g, &input, &params, false, &mut stream(0, Purpose::Dropout))?;
    println!("contextual embeddings: {:?}", g.shape(out.hidden));
    let first_map = out.attention[0][0];
    println!("layer 0, head 0, row 0 attention: {:.3?}", g.value(first_map).row(0)?);
    let cls = cls_vector(&mut g, out.hidden)?;
    println!("[CLS] vector: {:.3?}", g.value(cls).data());
    Ok(())
}
