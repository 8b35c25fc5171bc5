use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercase, whitespace-split tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// Closed token↔id bijection. Ids 0..4 are reserved for the special tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Build from words in first-seen order after the specials; duplicates
    /// are ignored.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len() as u32);
                tokens.push(w);
            }
        }
        Self { tokens, index }
    }

    /// Sorted word list from a text corpus, so the ids do not depend on
    /// record order.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts.into_iter().flat_map(tokenize).collect();
        words.sort();
        words.dedup();
        Self::new(words)
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::Lookup {
                id,
                vocab_size: self.tokens.len(),
            })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokenize and map to ids, truncating to `max_len`. Unknown words are an
    /// error because the vocabulary is closed.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Vec<u32>> {
        tokenize(text)
            .into_iter()
            .take(max_len)
            .map(|w| {
                self.id(&w).ok_or_else(|| {
                    Error::Domain(format!("word `{w}` is not in the closed vocabulary"))
                })
            })
            .collect()
    }

    /// Join tokens up to the first end/pad marker; specials are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS && i != PAD)
            .filter(|&&i| i > UNK)
            .filter_map(|&i| self.tokens.get(i as usize).map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Stable fingerprint of the token list, stored in snapshot headers.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        crate::nn::params::hex(&h.finalize()[..8])
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS.map(String::from) {
            return Err(Error::config(
                "vocabulary must start with the special tokens",
            ));
        }
        let mut v = Self {
            tokens,
            index: HashMap::new(),
        };
        v.rebuild_index();
        if v.index.len() != v.tokens.len() {
            return Err(Error::config("vocabulary contains duplicate tokens"));
        }
        Ok(v)
    }
}

/// Padded view of one caption: ids and a 0/1 validity mask of length `len`.
pub fn pad_to(ids: &[u32], len: usize) -> (Vec<u32>, Vec<f32>) {
    let mut out = vec![PAD; len];
    let mut mask = vec![0.0; len];
    for (i, &id) in ids.iter().take(len).enumerate() {
        out[i] = id;
        mask[i] = 1.0;
    }
    (out, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode() {
        let v = Vocab::from_corpus(["The red circle", "a blue square"]);
        let ids = v.encode("the RED   circle", 24).unwrap();
        assert_eq!(v.decode(&ids), "the red circle");
        assert!(v.encode("green", 24).is_err());
        assert_eq!(v.encode("a blue square", 2).unwrap().len(), 2);
    }

    #[test]
    fn corpus_order_does_not_matter() {
        let a = Vocab::from_corpus(["x y", "z"]);
        let b = Vocab::from_corpus(["z", "y x"]);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn padding_mask() {
        let (ids, mask) = pad_to(&[5, 6], 4);
        assert_eq!(ids, vec![5, 6, 0, 0]);
        assert_eq!(mask, vec![1.0, 1.0, 0.0, 0.0]);
    }
}
