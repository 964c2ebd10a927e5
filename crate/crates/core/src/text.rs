//! Token ids, vocabularies and sentence pairs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Ids below this value are special tokens.
pub const RESERVED_TOKENS: usize = 4;

const SPECIAL_NAMES: [&str; RESERVED_TOKENS] = ["<pad>", "<s>", "</s>", "<unk>"];

/// A source/target pair of raw token ids (no special tokens).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl Example {
    pub fn new(src: Vec<usize>, tgt: Vec<usize>) -> Self {
        Example { src, tgt }
    }

    /// `src </s>`
    pub fn encoder_input(&self) -> Vec<usize> {
        let mut v = self.src.clone();
        v.push(EOS);
        v
    }

    /// `<s> tgt`
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.tgt.len() + 1);
        v.push(BOS);
        v.extend_from_slice(&self.tgt);
        v
    }

    /// `tgt </s>`, aligned with [`Example::decoder_input`].
    pub fn decoder_target(&self) -> Vec<usize> {
        let mut v = self.tgt.clone();
        v.push(EOS);
        v
    }
}

/// Bidirectional token/id map. Ids `0..RESERVED_TOKENS` are the specials.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocab {
    /// Specials followed by `tokens` in first-seen order; duplicates and
    /// special names are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIAL_NAMES {
            v.push(s.to_string());
        }
        for t in tokens {
            v.push(t.into());
        }
        v
    }

    /// Specials plus synthetic symbols `t4, t5, ...` up to `size` entries.
    pub fn synthetic(size: usize) -> Self {
        Self::from_tokens((RESERVED_TOKENS..size.max(RESERVED_TOKENS)).map(|i| format!("t{i}")))
    }

    fn push(&mut self, t: String) {
        if !self.index.contains_key(&t) {
            self.index.insert(t.clone(), self.tokens.len());
            self.tokens.push(t);
        }
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(Error::Index {
            what: "vocabulary",
            index: id,
            bound: self.tokens.len(),
        })
    }

    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Joins non-special tokens with spaces.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= RESERVED_TOKENS {
                out.push(self.token(id)?);
            }
        }
        Ok(out.join(" "))
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    /// Inverse of [`Vocab::to_text`]; the first lines must be the specials.
    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED_TOKENS
            || tokens[..RESERVED_TOKENS]
                .iter()
                .zip(SPECIAL_NAMES)
                .any(|(a, b)| a != b)
        {
            return Err(Error::data("vocabulary file must start with <pad> <s> </s> <unk>"));
        }
        let mut v = Vocab {
            tokens,
            index: HashMap::new(),
        };
        v.rebuild_index();
        if v.index.len() != v.tokens.len() {
            return Err(Error::data("vocabulary file contains duplicate tokens"));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first() {
        let v = Vocab::from_tokens(["a", "b", "a", "<s>"]);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<s>"), BOS);
        assert_eq!(v.id("</s>"), EOS);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.encode("a b c"), vec![4, 5, UNK]);
        assert_eq!(v.decode(&[BOS, 4, 5, EOS, PAD]).unwrap(), "a b");
    }

    #[test]
    fn text_round_trip() {
        let v = Vocab::synthetic(10);
        let back = Vocab::from_text(&v.to_text()).unwrap();
        assert_eq!(back.len(), 10);
        assert_eq!(back.id("t7"), 7);
        assert!(Vocab::from_text("a\nb\n").is_err());
    }

    #[test]
    fn example_framing() {
        let e = Example::new(vec![5, 6], vec![7]);
        assert_eq!(e.encoder_input(), vec![5, 6, EOS]);
        assert_eq!(e.decoder_input(), vec![BOS, 7]);
        assert_eq!(e.decoder_target(), vec![7, EOS]);
    }
}
