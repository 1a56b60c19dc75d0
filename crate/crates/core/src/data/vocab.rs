use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const TAG_SUBJECT: usize = 4;
pub const TAG_BEFORE: usize = 5;
pub const TAG_AFTER: usize = 6;

const RESERVED: [&str; 7] = ["<pad>", "<bos>", "<eos>", "<unk>", "<subj>", "<bef>", "<aft>"];
pub const RESERVED_COUNT: usize = RESERVED.len();

/// Which of the three boundary captions a decoder pass produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionField {
    Subject,
    Before,
    After,
}

impl CaptionField {
    pub const ALL: [CaptionField; 3] = [CaptionField::Subject, CaptionField::Before, CaptionField::After];

    pub fn tag(self) -> usize {
        match self {
            CaptionField::Subject => TAG_SUBJECT,
            CaptionField::Before => TAG_BEFORE,
            CaptionField::After => TAG_AFTER,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CaptionField::Subject => "subject",
            CaptionField::Before => "before",
            CaptionField::After => "after",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for CaptionField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn normalize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Closed token inventory. Ids `0..7` are the reserved and field-tag tokens;
/// words follow in insertion order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Rebuilds a vocabulary from its full token list (reserved tokens first).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_COUNT || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(Error::Config(
                "vocabulary does not start with the reserved tokens".into(),
            ));
        }
        let mut vocab = Self::new();
        for t in &tokens[RESERVED_COUNT..] {
            if t.is_empty() || vocab.index.contains_key(t) {
                return Err(Error::Config(format!("duplicate or empty vocabulary token `{t}`")));
            }
            vocab.insert(t.clone());
        }
        Ok(vocab)
    }

    fn insert(&mut self, word: String) -> usize {
        let id = self.tokens.len();
        self.index.insert(word.clone(), id);
        self.tokens.push(word);
        id
    }

    /// Adds `word` if absent and returns its id.
    pub fn add(&mut self, word: &str) -> usize {
        match self.index.get(word) {
            Some(&id) => id,
            None => self.insert(word.to_string()),
        }
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_special(id: usize) -> bool {
        id < RESERVED_COUNT && id != UNK
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words
            .iter()
            .map(|w| match self.index.get(w.as_ref()) {
                Some(&id) if id >= RESERVED_COUNT => id,
                _ => UNK,
            })
            .collect()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.encode_words(&normalize(text))
    }

    /// Inverse of [`Vocabulary::tokenize`] on normalized text. Control tokens
    /// (padding, sequence markers, field tags) are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| !Self::is_special(id))
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
