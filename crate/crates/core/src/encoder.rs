//! Shared layers: input packing, the lexicon (embedding) encoder and the
//! transformer stack that turns it into contextual embeddings.
//!
//! Layout is token-major: the contextual embeddings of an `m`-token input
//! form an `m x d` matrix whose row 0 belongs to `[CLS]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Var};

/// Longest packed input the encoder accepts.
pub const MAX_LEN: usize = 512;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub cls: usize,
    pub sep: usize,
}

/// Token and segment ids ready for the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedInput {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
}

impl PackedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Index of the first token of segment 1, if there is a second segment.
    pub fn second_segment_start(&self) -> Option<usize> {
        self.segment_ids.iter().position(|&s| s == 1)
    }

    pub fn validate(&self, special: SpecialIds, max_len: usize) -> Result<()> {
        if self.token_ids.first() != Some(&special.cls) {
            return Err(Error::Input("packed input must start with [CLS]".into()));
        }
        if self.token_ids.len() != self.segment_ids.len() {
            return Err(Error::Input("token and segment ids differ in length".into()));
        }
        if self.len() > max_len {
            return Err(Error::Input(format!("packed input of {} tokens exceeds {max_len}", self.len())));
        }
        let ordered = self.segment_ids.windows(2).all(|w| w[0] <= w[1]);
        if !ordered || self.segment_ids.iter().any(|&s| s > 1) {
            return Err(Error::Input("segment ids must be a non-decreasing 0/1 sequence".into()));
        }
        Ok(())
    }
}

/// Lays out `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`, truncating to `max_len`.
///
/// Pairs are shortened by trimming the tail of whichever sentence is
/// currently longer (the first one on ties), one token at a time.
pub fn pack(a: &[usize], b: Option<&[usize]>, max_len: usize, special: SpecialIds) -> Result<PackedInput> {
    if a.is_empty() || b.is_some_and(|b| b.is_empty()) {
        return Err(Error::Input("cannot pack an empty sentence".into()));
    }
    let overhead = if b.is_some() { 3 } else { 2 };
    let min_len = overhead + if b.is_some() { 2 } else { 1 };
    if max_len < min_len {
        return Err(Error::Input(format!("max_len {max_len} leaves no room for content")));
    }
    let mut len_a = a.len();
    let mut len_b = b.map_or(0, <[usize]>::len);
    while len_a + len_b + overhead > max_len {
        if b.is_none() || len_a >= len_b {
            len_a -= 1;
        } else {
            len_b -= 1;
        }
    }
    let mut token_ids = Vec::with_capacity(len_a + len_b + overhead);
    token_ids.push(special.cls);
    token_ids.extend_from_slice(&a[..len_a]);
    token_ids.push(special.sep);
    let mut segment_ids = vec![0; token_ids.len()];
    if let Some(b) = b {
        token_ids.extend_from_slice(&b[..len_b]);
        token_ids.push(special.sep);
        segment_ids.resize(token_ids.len(), 1);
    }
    Ok(PackedInput { token_ids, segment_ids })
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub query_w: ParamId,
    pub query_b: ParamId,
    pub key_w: ParamId,
    pub key_b: ParamId,
    pub value_w: ParamId,
    pub value_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub attn_ln_gain: ParamId,
    pub attn_ln_bias: ParamId,
    pub ff_in_w: ParamId,
    pub ff_in_b: ParamId,
    pub ff_out_w: ParamId,
    pub ff_out_b: ParamId,
    pub ff_ln_gain: ParamId,
    pub ff_ln_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub word_emb: ParamId,
    pub segment_emb: ParamId,
    pub position_emb: ParamId,
    pub layers: Vec<LayerParams>,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub hidden_dropout: f64,
    pub layer_norm_eps: f64,
}

/// Prefix shared by every encoder parameter name.
pub const PARAM_PREFIX: &str = "encoder.";

impl EncoderParams {
    /// Registers freshly initialized encoder weights under `encoder.*`.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ff = d * config.ffn_multiplier;
        let word_emb = store.add_normal("encoder.word_emb", &[config.vocab_size, d], INIT_STD, rng)?;
        let segment_emb = store.add_normal("encoder.segment_emb", &[2, d], INIT_STD, rng)?;
        let position_emb = store.add_normal("encoder.position_emb", &[config.max_len, d], INIT_STD, rng)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("encoder.layer{l}.");
            let mut weight = |name: &str, shape: &[usize]| store.add_normal(format!("{p}{name}"), shape, INIT_STD, rng);
            let query_w = weight("attn.query.weight", &[d, d])?;
            let key_w = weight("attn.key.weight", &[d, d])?;
            let value_w = weight("attn.value.weight", &[d, d])?;
            let out_w = weight("attn.output.weight", &[d, d])?;
            let ff_in_w = weight("ffn.input.weight", &[d, ff])?;
            let ff_out_w = weight("ffn.output.weight", &[ff, d])?;
            let mut constant = |name: &str, len: usize, v: f64| store.add_constant(format!("{p}{name}"), &[len], v);
            layers.push(LayerParams {
                query_w,
                query_b: constant("attn.query.bias", d, 0.0)?,
                key_w,
                key_b: constant("attn.key.bias", d, 0.0)?,
                value_w,
                value_b: constant("attn.value.bias", d, 0.0)?,
                out_w,
                out_b: constant("attn.output.bias", d, 0.0)?,
                attn_ln_gain: constant("attn.norm.gain", d, 1.0)?,
                attn_ln_bias: constant("attn.norm.bias", d, 0.0)?,
                ff_in_w,
                ff_in_b: constant("ffn.input.bias", ff, 0.0)?,
                ff_out_w,
                ff_out_b: constant("ffn.output.bias", d, 0.0)?,
                ff_ln_gain: constant("ffn.norm.gain", d, 1.0)?,
                ff_ln_bias: constant("ffn.norm.bias", d, 0.0)?,
            });
        }
        Ok(EncoderParams {
            word_emb,
            segment_emb,
            position_emb,
            layers,
            d_model: d,
            n_heads: config.n_heads,
            max_len: config.max_len,
            hidden_dropout: config.hidden_dropout,
            layer_norm_eps: config.layer_norm_eps,
        })
    }
}

/// Contextual embeddings plus the attention maps that produced them.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `m x d` contextual embeddings.
    pub hidden: Var,
    /// `attention[layer][head]` is an `m x m` row-stochastic matrix.
    pub attention: Vec<Vec<Var>>,
}

/// Row i is `word_emb[id_i] + segment_emb[seg_i] + position_emb[i]`.
pub fn lexicon_encode(g: &mut Graph<'_>, input: &PackedInput, params: &EncoderParams) -> Result<Var> {
    let m = input.len();
    if m > params.max_len {
        return Err(Error::Index(format!(
            "position {} out of range for {} positions",
            m - 1,
            params.max_len
        )));
    }
    let word_table = g.param(params.word_emb)?;
    let segment_table = g.param(params.segment_emb)?;
    let position_table = g.param(params.position_emb)?;
    let words = g.embedding(word_table, &input.token_ids)?;
    let segments = g.embedding(segment_table, &input.segment_ids)?;
    let positions: Vec<usize> = (0..m).collect();
    let positions = g.embedding(position_table, &positions)?;
    let sum = g.add(words, segments)?;
    g.add(sum, positions)
}

fn linear(g: &mut Graph<'_>, x: Var, weight: ParamId, bias: ParamId) -> Result<Var> {
    let w = g.param(weight)?;
    let b = g.param(bias)?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Post-norm transformer stack over the lexicon embeddings.
pub fn transformer_encode<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    embeddings: Var,
    params: &EncoderParams,
    training: bool,
    rng: &mut R,
) -> Result<EncoderOutput> {
    let shape = g.shape(embeddings).to_vec();
    if shape.len() != 2 || shape[1] != params.d_model {
        return Err(Error::Dimension(format!(
            "encoder expects m x {}, found {shape:?}",
            params.d_model
        )));
    }
    let mut hidden = embeddings;
    let mut attention = Vec::with_capacity(params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let (out, maps) =
            encoder_layer(g, hidden, layer, params, training, rng).map_err(|e| e.in_context(format!("encoder layer {i}")))?;
        hidden = out;
        attention.push(maps);
    }
    Ok(EncoderOutput { hidden, attention })
}

fn encoder_layer<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    x: Var,
    layer: &LayerParams,
    params: &EncoderParams,
    training: bool,
    rng: &mut R,
) -> Result<(Var, Vec<Var>)> {
    let d = params.d_model;
    let head_dim = d / params.n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let q = linear(g, x, layer.query_w, layer.query_b)?;
    let k = linear(g, x, layer.key_w, layer.key_b)?;
    let v = linear(g, x, layer.value_w, layer.value_b)?;
    let mut contexts = Vec::with_capacity(params.n_heads);
    let mut maps = Vec::with_capacity(params.n_heads);
    for h in 0..params.n_heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = g.slice(q, 1, lo, hi)?;
        let kh = g.slice(k, 1, lo, hi)?;
        let vh = g.slice(v, 1, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let weights = g.softmax(scores, 1)?;
        contexts.push(g.matmul(weights, vh)?);
        maps.push(weights);
    }
    let context = if contexts.len() == 1 { contexts[0] } else { g.concat(&contexts, 1)? };
    let attn = linear(g, context, layer.out_w, layer.out_b)?;
    let attn = g.dropout(attn, params.hidden_dropout, training, rng)?;
    let res = g.add(x, attn)?;
    let (gain, bias) = (g.param(layer.attn_ln_gain)?, g.param(layer.attn_ln_bias)?);
    let x1 = g.layer_norm(res, gain, bias, params.layer_norm_eps)?;

    let inner = linear(g, x1, layer.ff_in_w, layer.ff_in_b)?;
    let inner = g.gelu(inner)?;
    let ff = linear(g, inner, layer.ff_out_w, layer.ff_out_b)?;
    let ff = g.dropout(ff, params.hidden_dropout, training, rng)?;
    let res = g.add(x1, ff)?;
    let (gain, bias) = (g.param(layer.ff_ln_gain)?, g.param(layer.ff_ln_bias)?);
    let x2 = g.layer_norm(res, gain, bias, params.layer_norm_eps)?;
    Ok((x2, maps))
}

/// Lexicon encoding followed by the transformer stack.
pub fn encode<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    input: &PackedInput,
    params: &EncoderParams,
    training: bool,
    rng: &mut R,
) -> Result<EncoderOutput> {
    let l1 = lexicon_encode(g, input, params)?;
    transformer_encode(g, l1, params, training, rng)
}

/// Contextual embedding of `[CLS]` (row 0).
pub fn cls_vector(g: &mut Graph<'_>, contextual: Var) -> Result<Var> {
    g.row(contextual, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use crate::tensor::Tensor;

    const SPECIAL: SpecialIds = SpecialIds { cls: 2, sep: 3 };

    fn params(store: &mut ParamStore, n_layers: usize, d: usize, heads: usize) -> EncoderParams {
        let config = ModelConfig {
            max_len: 16,
            ..ModelConfig::new(d, n_layers, heads, 20)
        };
        EncoderParams::init(store, &config, &mut stream(3, Purpose::Init)).unwrap()
    }

    #[test]
    fn pack_layouts() {
        let single = pack(&[7, 8], None, 512, SPECIAL).unwrap();
        assert_eq!(single.token_ids, [2, 7, 8, 3]);
        assert_eq!(single.segment_ids, [0, 0, 0, 0]);
        let pair = pack(&[7], Some(&[9]), 512, SPECIAL).unwrap();
        assert_eq!(pair.token_ids, [2, 7, 3, 9, 3]);
        assert_eq!(pair.segment_ids, [0, 0, 0, 1, 1]);
        assert_eq!(pair.second_segment_start(), Some(3));
        pair.validate(SPECIAL, 512).unwrap();
    }

    #[test]
    fn truncation() {
        let long: Vec<usize> = (0..600).map(|i| 4 + i % 10).collect();
        assert_eq!(pack(&long, None, 512, SPECIAL).unwrap().len(), 512);
        // 6 + 2 words into 8 slots: the longer first sentence loses 3
        let p = pack(&[4, 5, 6, 7, 8, 9], Some(&[10, 11]), 8, SPECIAL).unwrap();
        assert_eq!(p.token_ids, [2, 4, 5, 6, 3, 10, 11, 3]);
        assert!(pack(&[], None, 8, SPECIAL).is_err());
    }

    #[test]
    fn zero_tables_give_zero_lexicon() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 0, 4, 1);
        for param in store.iter_mut() {
            param.value = Tensor::zeros(param.value.shape().to_vec());
        }
        let mut g = Graph::with_params(&store);
        let input = pack(&[5, 6], None, 16, SPECIAL).unwrap();
        let l1 = lexicon_encode(&mut g, &input, &p).unwrap();
        assert_eq!(g.shape(l1), [4, 4]);
        assert!(g.value(l1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_stack_is_identity() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 0, 4, 1);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0, 4.0], [0.5, 0.0, -1.0, 2.0]]).unwrap()).unwrap();
        let out = transformer_encode(&mut g, x, &p, false, &mut stream(0, Purpose::Dropout)).unwrap();
        assert_eq!(out.hidden, x);
        let cls = cls_vector(&mut g, out.hidden).unwrap();
        assert_eq!(g.value(cls).data(), [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 2, 8, 2);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::from_rows(&[[0.1; 8]]).unwrap()).unwrap();
        let out = transformer_encode(&mut g, x, &p, false, &mut stream(0, Purpose::Dropout)).unwrap();
        for maps in &out.attention {
            for &a in maps {
                assert_eq!(g.value(a).data(), [1.0]);
            }
        }
    }

    #[test]
    fn encode_is_deterministic_and_finite() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 2, 8, 2);
        let input = pack(&[5, 6, 7], Some(&[8, 9]), 16, SPECIAL).unwrap();
        let run = || {
            let mut g = Graph::with_params(&store);
            let out = encode(&mut g, &input, &p, true, &mut stream(4, Purpose::Dropout)).unwrap();
            g.value(out.hidden).clone()
        };
        let a = run();
        assert_eq!(a.shape(), [8, 8]);
        assert!(a.is_finite());
        assert_eq!(a, run());
    }

    #[test]
    fn rejects_wrong_width_and_length() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 1, 4, 1);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        assert!(transformer_encode(&mut g, x, &p, false, &mut stream(0, Purpose::Dropout)).is_err());
        let long = PackedInput {
            token_ids: vec![2; 17],
            segment_ids: vec![0; 17],
        };
        assert!(lexicon_encode(&mut g, &long, &p).is_err());
    }
}
