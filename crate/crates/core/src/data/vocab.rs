use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

const WORDS: &[&str] = &[
    "a", "an", "the", "and", "is", "are", "there", "of", "to", "in", "on", "with", "this", "what", "which", "how",
    "many", "color", "shape", "object", "objects", "image", "picture", "scene", "describe", "write", "short",
    "caption", "give", "briefly", "above", "below", "left", "right", "top", "bottom", "corner", "circle", "square",
    "triangle", "red", "green", "blue", "yellow", "one", "two", "three", "?",
];

/// Closed word-level vocabulary. Ids 0..4 are reserved for pad, start, end and unk.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<&'static str>,
    index: HashMap<&'static str, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let words: Vec<&'static str> = SPECIALS.iter().chain(WORDS.iter()).copied().collect();
        let index = words.iter().enumerate().map(|(i, w)| (*w, i)).collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&'static str> {
        self.words.get(id).copied()
    }

    /// Splits on whitespace. Unknown words are an error when `strict`, otherwise
    /// they map to unk and a warning is logged.
    pub fn tokenize(&self, text: &str, strict: bool) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| match self.id(w) {
                Some(id) => Ok(id),
                None if strict => Err(Error::Vocab(format!("unknown word {w:?}"))),
                None => {
                    log::warn!("unknown word {w:?} mapped to <unk>");
                    Ok(UNK)
                }
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| self.word(i).ok_or_else(|| Error::Vocab(format!("id {i} outside vocabulary of {}", self.len()))))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

pub fn is_special(id: usize) -> bool {
    id == PAD || id == START || id == END
}

/// Drops pad, start and end tokens.
pub fn strip_special(ids: &[usize]) -> Vec<usize> {
    ids.iter().copied().filter(|&i| !is_special(i)).collect()
}
