//! Word-level tokenization, vocabulary and embedding lookup.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
/// Joins a question and its answer into one round sentence.
pub const SEP: u32 = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<sos>", "<eos>", "<unk>", "<sep>"];

pub const EMBEDDING_INIT_BOUND: f64 = 0.08;

/// Lowercases, splits on whitespace and splits punctuation into separate
/// tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
        } else if c.is_ascii_punctuation() {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
            tokens.push(c.to_string());
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub source_text: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `SOS ids.. EOS`, the framing the question decoder trains on.
    pub fn framed(&self) -> Vec<u32> {
        let mut v = Vec::with_capacity(self.ids.len() + 2);
        v.push(SOS);
        v.extend_from_slice(&self.ids);
        v.push(EOS);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Tokens with at least `min_count` occurrences, ordered by frequency
    /// descending then token ascending, after the reserved entries.
    pub fn build<'a, I>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if min_count == 0 {
            return Err(Error::invalid("min_count must be at least 1"));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in corpus {
            for tok in seq {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && !RESERVED.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds from a token list in id order; the reserved entries must lead.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(Error::invalid("vocabulary must start with the reserved tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        match self.index.get(token) {
            Some(&id) if id as usize >= RESERVED.len() => id,
            _ => UNK,
        }
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Total: unknown words become `UNK`.
    pub fn encode_text(&self, text: &str) -> TokenSequence {
        TokenSequence {
            ids: self.encode(&tokenize(text)),
            source_text: text.to_string(),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK as usize]))
            .collect()
    }

    pub fn decode_text(&self, ids: &[u32]) -> String {
        detokenize(&self.decode(ids))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.tokens)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_tokens(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn init_embedding<R: Rng + ?Sized>(vocab_size: usize, dim: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(&[vocab_size, dim], EMBEDDING_INIT_BOUND, rng)
}

/// `[len, dim]` matrix whose row `i` is the embedding of `ids[i]`.
pub fn embed_tokens(tape: &mut Tape, table: Var, ids: &[u32]) -> Result<Var> {
    let size = tape.value(table).shape()[0];
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= size) {
        return Err(Error::TokenOutOfRange { id: bad, size });
    }
    let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    tape.gather_rows(table, &rows)
}
