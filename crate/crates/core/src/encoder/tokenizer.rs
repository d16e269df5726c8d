use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const SEP: u32 = 3;
const BYTE_BASE: u32 = 4;
const WORD_BASE: u32 = BYTE_BASE + 256;

/// Whitespace word tokenizer with a byte fallback for out-of-vocabulary words.
///
/// Ids `0..4` are specials, `4..260` the raw bytes, `260..` known words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), WORD_BASE + i as u32))
            .collect();
        Tokenizer { words, index }
    }

    /// Keep the most frequent words (ties broken lexically) that fit `vocab_size`.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Result<Self> {
        if vocab_size < WORD_BASE as usize {
            return Err(Error::invalid(format!(
                "vocab_size {vocab_size} leaves no room beyond {WORD_BASE} reserved ids"
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let words = ranked
            .into_iter()
            .take(vocab_size - WORD_BASE as usize)
            .map(|(w, _)| w.to_string())
            .collect();
        Ok(Self::from_words(words))
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn vocab_size(&self) -> usize {
        WORD_BASE as usize + self.words.len()
    }

    /// Token ids for `text`, truncated to `max_len`. Empty text becomes `[SEP]`.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids = Vec::new();
        for w in text.split_whitespace() {
            match self.index.get(w) {
                Some(&id) => ids.push(id),
                None => ids.extend(w.bytes().map(|b| BYTE_BASE + b as u32)),
            }
            if ids.len() >= max_len {
                break;
            }
        }
        ids.truncate(max_len);
        if ids.is_empty() {
            ids.push(SEP);
        }
        ids
    }

    pub(crate) fn rebuild_index(&mut self) {
        *self = Self::from_words(std::mem::take(&mut self.words));
    }
}
