use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::encoder::SpecialIds;
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const CONTINUATION: &str = "##";

/// Token list with dense ids; the id of a token is its position.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unk: usize,
    special: SpecialIds,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Validation(format!("vocabulary entry {id} is empty or contains whitespace")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Validation(format!("vocabulary token {tok:?} appears twice")));
            }
        }
        let need = |t: &str| {
            index
                .get(t)
                .copied()
                .ok_or_else(|| Error::Validation(format!("vocabulary lacks {t}")))
        };
        need(PAD)?;
        let unk = need(UNK)?;
        let special = SpecialIds {
            cls: need(CLS)?,
            sep: need(SEP)?,
        };
        Ok(Vocabulary {
            tokens,
            index,
            unk,
            special,
        })
    }

    /// Reads one token per line; the line number (from 0) is the id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Special tokens followed by `w0`, `w1`, ... up to `size` entries.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size <= 4 {
            return Err(Error::Config(format!("synthetic vocabulary of {size} leaves no word tokens")));
        }
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        tokens.extend((0..size - 4).map(|i| format!("w{i}")));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn special_ids(&self) -> SpecialIds {
        self.special
    }

    /// Whitespace split, then greedy longest-match wordpieces per word.
    /// A word that cannot be fully segmented becomes a single `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            match self.wordpieces(word) {
                Some(pieces) => ids.extend(pieces),
                None => ids.push(self.unk),
            }
        }
        ids
    }

    fn wordpieces(&self, word: &str) -> Option<Vec<usize>> {
        let bounds: Vec<usize> = word.char_indices().map(|(i, _)| i).chain([word.len()]).collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut key = String::new();
        while start + 1 < bounds.len() {
            let found = (start + 1..bounds.len()).rev().find_map(|end| {
                key.clear();
                if start > 0 {
                    key.push_str(CONTINUATION);
                }
                key.push_str(&word[bounds[start]..bounds[end]]);
                self.index.get(key.as_str()).map(|&id| (id, end))
            });
            let (id, end) = found?;
            pieces.push(id);
            start = end;
        }
        Some(pieces)
    }
}
