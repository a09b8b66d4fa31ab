use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD_ID: usize = 0;
pub const OOV_ID: usize = 1;
const RESERVED: usize = 2;

/// Lowercase word-level tokenizer over a closed vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vocab", into = "Vocab")]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Vocab {
    words: Vec<String>,
}

impl From<Vocab> for Tokenizer {
    fn from(v: Vocab) -> Self {
        Tokenizer::from_words(v.words)
    }
}

impl From<Tokenizer> for Vocab {
    fn from(t: Tokenizer) -> Self {
        Vocab { words: t.words }
    }
}

/// Split `text` into normalized words: lowercase, outer punctuation
/// stripped, punctuation-only fragments dropped.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

impl Tokenizer {
    /// Vocabulary made of every word occurring in `corpus`, sorted.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Self {
        let set: BTreeSet<String> = corpus.iter().flat_map(|t| words(t.as_ref())).collect();
        Self::from_words(set.into_iter().collect())
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i + RESERVED)).collect();
        Tokenizer { words, index }
    }

    /// Number of ids including the reserved padding and OOV ids.
    pub fn vocab_size(&self) -> usize {
        self.words.len() + RESERVED
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        words(text).iter().map(|w| self.index.get(w).copied().unwrap_or(OOV_ID)).collect()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        match id {
            PAD_ID => Some("<pad>"),
            OOV_ID => Some("<unk>"),
            _ => self.words.get(id - RESERVED).map(String::as_str),
        }
    }
}
