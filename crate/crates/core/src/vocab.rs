//! Tokenization and vocabularies.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

const PUNCTUATION: &[char] = &['.', ',', '!', '?', '\'', '"'];

/// Lowercases, splits on whitespace, and splits `.,!?'"` off as their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if PUNCTUATION.contains(&ch) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else {
                current.extend(ch.to_lowercase());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Bidirectional token/id map. Ids 0..4 are the reserved tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    min_count: usize,
    tokens: Vec<String>,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = crate::error::Error;

    fn try_from(r: VocabularyRepr) -> Result<Self> {
        Self::from_tokens(r.tokens, r.min_count)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            min_count: v.min_count,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    /// Tokens with frequency `>= min_count`, ids assigned by descending
    /// frequency and then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Self> {
        if min_count < 1 {
            return Err(invalid("min_count must be at least 1"));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in corpus {
            for tok in sentence {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED_TOKENS.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens, min_count)
    }

    /// Rebuilds from the id-ordered token list (as stored in checkpoints).
    pub fn from_tokens(tokens: Vec<String>, min_count: usize) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len()
            || tokens.iter().zip(RESERVED_TOKENS).any(|(a, b)| a != b)
        {
            return Err(invalid("vocabulary must start with the four reserved tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), id).is_some() {
                return Err(invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Out-of-vocabulary tokens map to `<unk>`; at most `max_len` content ids
    /// are kept, and `<end>` is always appended.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> TokenSequence {
        let mut ids: Vec<usize> = tokens
            .iter()
            .take(max_len)
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK))
            .collect();
        ids.push(END);
        TokenSequence { ids }
    }

    pub fn encode_text(&self, text: &str, max_len: usize) -> TokenSequence {
        self.encode(&tokenize(text), max_len)
    }

    /// Tokens up to (not including) the first `<end>`; padding is skipped.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != END)
            .filter(|&&id| id != PAD)
            .map(|&id| self.token(id).unwrap_or(RESERVED_TOKENS[UNK]).to_string())
            .collect()
    }

    pub fn decode_text(&self, ids: &[usize]) -> String {
        self.decode(ids).join(" ")
    }
}

/// Token ids terminated by `<end>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    /// Wraps ids as given; a trailing `<end>` is added if missing.
    pub fn from_ids(mut ids: Vec<usize>) -> Self {
        if ids.last() != Some(&END) {
            ids.push(END);
        }
        Self { ids }
    }

    /// All ids including the terminal `<end>`.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn content(&self) -> &[usize] {
        &self.ids[..self.ids.len() - 1]
    }

    /// Number of ids including `<end>`.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
