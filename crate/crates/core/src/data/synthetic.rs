//! Generated corpora whose labels are recomputable from the text.
//!
//! Over [`Vocabulary::synthetic`], words `w0..w7` are markers and every
//! later word is filler:
//!
//! - single: a sentence is class 1 iff it contains one of the chosen markers;
//! - pair: class is the band of `|b ∩ a|` (0, 1-2, 3-4 shared words);
//! - regression: score is `|b ∩ a| / 4`;
//! - ranking: the query and its positive candidate carry the same marker,
//!   the three negatives carry none.
//!
//! [`Vocabulary::synthetic`]: super::Vocabulary::synthetic

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::{Candidate, DatasetSplit, Example, Split};
use crate::error::{Error, Result};
use crate::task::TaskKind;

pub const MARKER_COUNT: usize = 8;
const SPECIALS: usize = 4;
const PAIR_A_LEN: usize = 5;
const PAIR_B_LEN: usize = 4;
const NEGATIVES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOptions {
    /// Marker indices (into `w0..w7`) that make a single sentence positive
    /// and that ranking queries draw from.
    pub markers: Vec<usize>,
    /// Words per single sentence, ranking query and ranking candidate.
    pub sentence_len: usize,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            markers: vec![0],
            sentence_len: 6,
        }
    }
}

pub fn make_synthetic<R: Rng + ?Sized>(
    kind: TaskKind,
    size: usize,
    vocab_size: usize,
    rng: &mut R,
) -> Result<DatasetSplit> {
    make_synthetic_with(kind, size, vocab_size, &SyntheticOptions::default(), rng)
}

pub fn make_synthetic_with<R: Rng + ?Sized>(
    kind: TaskKind,
    size: usize,
    vocab_size: usize,
    options: &SyntheticOptions,
    rng: &mut R,
) -> Result<DatasetSplit> {
    if size == 0 {
        return Err(Error::Config("synthetic dataset size must be at least 1".into()));
    }
    if options.sentence_len < 2 {
        return Err(Error::Config("synthetic sentences need at least 2 words".into()));
    }
    let fillers = vocab_size.saturating_sub(SPECIALS + MARKER_COUNT);
    let needed = match kind {
        TaskKind::Single | TaskKind::Ranking => options.sentence_len,
        TaskKind::Pair | TaskKind::Regression => PAIR_A_LEN + PAIR_B_LEN,
    };
    if fillers < needed {
        return Err(Error::Config(format!(
            "vocabulary of {vocab_size} has {fillers} filler words, {kind} data needs {needed}"
        )));
    }
    if options.markers.is_empty() || options.markers.iter().any(|&m| m >= MARKER_COUNT) {
        return Err(Error::Config(format!(
            "markers must be a non-empty subset of 0..{MARKER_COUNT}, got {:?}",
            options.markers
        )));
    }
    let gen = Generator { fillers, options };
    let examples = match kind {
        TaskKind::Single => {
            let mut classes: Vec<usize> = (0..size).map(|i| i % 2).collect();
            classes.shuffle(rng);
            classes.into_iter().map(|c| gen.single(c, rng)).collect()
        }
        TaskKind::Pair => {
            let mut classes: Vec<usize> = (0..size).map(|i| i % 3).collect();
            classes.shuffle(rng);
            classes
                .into_iter()
                .map(|class| {
                    let overlap = match class {
                        0 => 0,
                        1 => rng.random_range(1..=2),
                        _ => rng.random_range(3..=4),
                    };
                    let (text_a, text_b) = gen.pair(overlap, rng);
                    Example::Pair { text_a, text_b, class }
                })
                .collect()
        }
        TaskKind::Regression => (0..size)
            .map(|_| {
                let overlap = rng.random_range(0..=PAIR_B_LEN);
                let (text_a, text_b) = gen.pair(overlap, rng);
                Example::Regression {
                    text_a,
                    text_b,
                    score: overlap as f64 / PAIR_B_LEN as f64,
                }
            })
            .collect(),
        TaskKind::Ranking => (0..size).map(|i| gen.ranking(i, rng)).collect(),
    };
    Ok(DatasetSplit {
        task_name: kind.name().to_string(),
        split: Split::Train,
        examples,
    })
}

struct Generator<'a> {
    fillers: usize,
    options: &'a SyntheticOptions,
}

fn word(index: usize) -> String {
    format!("w{index}")
}

impl Generator<'_> {
    fn filler_words<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<String> {
        rand::seq::index::sample(rng, self.fillers, n)
            .into_iter()
            .map(|i| word(MARKER_COUNT + i))
            .collect()
    }

    /// Filler sentence with `marker` dropped in at a random position.
    fn marked<R: Rng + ?Sized>(&self, marker: Option<usize>, rng: &mut R) -> String {
        let mut words = self.filler_words(self.options.sentence_len, rng);
        if let Some(m) = marker {
            let at = rng.random_range(0..words.len());
            words[at] = word(m);
        }
        words.join(" ")
    }

    fn single<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Example {
        let marker = (class == 1).then(|| *self.options.markers.choose(rng).expect("markers are non-empty"));
        Example::Single {
            text: self.marked(marker, rng),
            class,
        }
    }

    /// Sentence `b` shares exactly `overlap` words with sentence `a`.
    fn pair<R: Rng + ?Sized>(&self, overlap: usize, rng: &mut R) -> (String, String) {
        let words = self.filler_words(PAIR_A_LEN + PAIR_B_LEN - overlap, rng);
        let (a, rest) = words.split_at(PAIR_A_LEN);
        let mut b: Vec<String> = a[..overlap].to_vec();
        b.extend_from_slice(rest);
        b.shuffle(rng);
        (a.join(" "), b.join(" "))
    }

    fn ranking<R: Rng + ?Sized>(&self, index: usize, rng: &mut R) -> Example {
        let marker = *self.options.markers.choose(rng).expect("markers are non-empty");
        let mut candidates = vec![Candidate {
            text: self.marked(Some(marker), rng),
            positive: true,
        }];
        for _ in 0..NEGATIVES {
            candidates.push(Candidate {
                text: self.marked(None, rng),
                positive: false,
            });
        }
        candidates.shuffle(rng);
        Example::Ranking {
            query_id: format!("q{index}"),
            query: self.marked(Some(marker), rng),
            candidates,
        }
    }
}
