//! Fixed word list shared by the caption generator, the text embedder and
//! the checkpoint format.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const NUM_PLACEHOLDERS: usize = 8;

const GLUE: &[&str] = &[
    PAD, "a", "an", "the", "photo", "image", "picture", "of", "and", "with", "next", "to", "on",
    "over", "background",
];
pub const SHAPE_WORDS: &[&str] = &["circle", "square", "triangle", "star", "blob"];
pub const TEXTURE_WORDS: &[&str] = &["solid", "stripes", "dots"];
const COLOR_WORDS: &[&str] = &["red", "green", "blue", "yellow", "purple", "orange", "white", "gray"];

/// Token ids are row indices into the embedding table. Base words come first,
/// then the `[v1]`..`[v8]` placeholder rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let words = GLUE
            .iter()
            .chain(SHAPE_WORDS)
            .chain(TEXTURE_WORDS)
            .chain(COLOR_WORDS)
            .map(|w| w.to_string())
            .chain((0..NUM_PLACEHOLDERS).map(placeholder_name))
            .collect();
        Self { words }
    }
}

/// Name of placeholder slot `k` (0-based): slot 0 is `[v1]`.
pub fn placeholder_name(k: usize) -> String {
    format!("[v{}]", k + 1)
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Number of ordinary (non-placeholder) words.
    pub fn base_len(&self) -> usize {
        self.words.len() - NUM_PLACEHOLDERS
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::Vocabulary(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn is_placeholder(&self, id: usize) -> bool {
        id >= self.base_len() && id < self.len()
    }

    /// Slot 0..8 of a placeholder word such as `[v3]`.
    pub fn placeholder_slot(&self, word: &str) -> Result<usize> {
        let id = self.id(word).map_err(|_| Error::UnknownPlaceholder(word.to_string()))?;
        if !self.is_placeholder(id) {
            return Err(Error::UnknownPlaceholder(word.to_string()));
        }
        Ok(id - self.base_len())
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("<unk>").to_string())
            .collect()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}
