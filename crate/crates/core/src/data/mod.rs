//! Datasets for the four task kinds: loading, tokenization, subsampling and
//! synthetic corpora with known structure.

mod sample;
mod synthetic;
mod tsv;
mod vocab;

pub use sample::{sample_size, subsample, subsample_indices, FRACTIONS};
pub use synthetic::{make_synthetic, make_synthetic_with, SyntheticOptions, MARKER_COUNT};
pub use tsv::{load_tsv, parse_tsv, to_tsv, write_tsv};
pub use vocab::{Vocabulary, CLS, CONTINUATION, PAD, SEP, UNK};

use std::fmt;

use crate::encoder::{pack, PackedInput};
use crate::error::{Error, Result};
use crate::task::TaskKind;

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub text: String,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Example {
    Single {
        text: String,
        class: usize,
    },
    Pair {
        text_a: String,
        text_b: String,
        class: usize,
    },
    Regression {
        text_a: String,
        text_b: String,
        score: f64,
    },
    Ranking {
        query_id: String,
        query: String,
        candidates: Vec<Candidate>,
    },
}

impl Example {
    pub fn kind(&self) -> TaskKind {
        match self {
            Example::Single { .. } => TaskKind::Single,
            Example::Pair { .. } => TaskKind::Pair,
            Example::Regression { .. } => TaskKind::Regression,
            Example::Ranking { .. } => TaskKind::Ranking,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Example::Regression { score, .. } if !score.is_finite() => {
                Err(Error::Validation(format!("regression score {score} is not finite")))
            }
            Example::Ranking {
                query_id, candidates, ..
            } => {
                let positives = candidates.iter().filter(|c| c.positive).count();
                if positives != 1 {
                    return Err(Error::Validation(format!(
                        "query {query_id} has {positives} positive candidates, expected exactly 1"
                    )));
                }
                if candidates.len() < 2 {
                    return Err(Error::Validation(format!("query {query_id} needs at least 2 candidates")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub task_name: String,
    pub split: Split,
    pub examples: Vec<Example>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// What the loss compares a prediction against.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Score(f64),
    /// One flag per candidate; exactly one is set.
    Ranking(Vec<bool>),
}

/// An example after tokenization and packing. Ranking examples carry one
/// packed (query, candidate) input per candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub inputs: Vec<PackedInput>,
    pub target: Target,
}

pub fn encode_example(example: &Example, vocab: &Vocabulary, max_len: usize) -> Result<EncodedExample> {
    example.validate()?;
    let special = vocab.special_ids();
    let single = |text: &str| pack(&vocab.tokenize(text), None, max_len, special);
    let pair = |a: &str, b: &str| pack(&vocab.tokenize(a), Some(&vocab.tokenize(b)), max_len, special);
    Ok(match example {
        Example::Single { text, class } => EncodedExample {
            inputs: vec![single(text)?],
            target: Target::Class(*class),
        },
        Example::Pair { text_a, text_b, class } => EncodedExample {
            inputs: vec![pair(text_a, text_b)?],
            target: Target::Class(*class),
        },
        Example::Regression { text_a, text_b, score } => EncodedExample {
            inputs: vec![pair(text_a, text_b)?],
            target: Target::Score(*score),
        },
        Example::Ranking { query, candidates, .. } => EncodedExample {
            inputs: candidates.iter().map(|c| pair(query, &c.text)).collect::<Result<_>>()?,
            target: Target::Ranking(candidates.iter().map(|c| c.positive).collect()),
        },
    })
}

pub fn encode_split(split: &DatasetSplit, vocab: &Vocabulary, max_len: usize) -> Result<Vec<EncodedExample>> {
    split
        .examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            encode_example(ex, vocab, max_len)
                .map_err(|e| Error::Input(format!("{} example {i}: {e}", split.task_name)))
        })
        .collect()
}
