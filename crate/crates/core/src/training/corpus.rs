use std::collections::HashMap;
use std::fmt;
use std::ops::RangeInclusive;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text::{Example, Vocab, RESERVED_TOKENS};

/// Sentence pairs over a shared vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub pairs: Vec<Example>,
    pub vocab: Vocab,
}

impl Corpus {
    /// Errors on empty sides or ids outside the vocabulary.
    pub fn new(pairs: Vec<Example>, vocab: Vocab) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            if p.src.is_empty() || p.tgt.is_empty() {
                return Err(Error::data(format!("pair {i} has an empty side")));
            }
            if let Some(&id) = p.src.iter().chain(&p.tgt).find(|&&id| id >= vocab.len()) {
                return Err(Error::data(format!(
                    "pair {i} uses id {id} outside vocabulary of {}",
                    vocab.len()
                )));
            }
        }
        Ok(Corpus { pairs, vocab })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Hex SHA-256 over the token ids of every pair, in order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.pairs {
            for side in [&p.src, &p.tgt] {
                h.update((side.len() as u64).to_le_bytes());
                for &id in side {
                    h.update((id as u64).to_le_bytes());
                }
            }
        }
        format!("{:x}", h.finalize())
    }

    /// First `n` pairs and the rest, sharing the vocabulary.
    pub fn split_at(&self, n: usize) -> (Corpus, Corpus) {
        let n = n.min(self.pairs.len());
        (
            Corpus {
                pairs: self.pairs[..n].to_vec(),
                vocab: self.vocab.clone(),
            },
            Corpus {
                pairs: self.pairs[n..].to_vec(),
                vocab: self.vocab.clone(),
            },
        )
    }

    /// First `n` pairs.
    pub fn take(&self, n: usize) -> Corpus {
        self.split_at(n).0
    }

    pub fn max_len(&self) -> usize {
        self.pairs
            .iter()
            .map(|p| p.src.len().max(p.tgt.len()))
            .max()
            .unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyTask {
    Copy,
    Reverse,
    Sort,
}

impl FromStr for ToyTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(ToyTask::Copy),
            "reverse" => Ok(ToyTask::Reverse),
            "sort" => Ok(ToyTask::Sort),
            _ => Err(Error::config(format!("unknown toy task `{s}` (copy|reverse|sort)"))),
        }
    }
}

impl fmt::Display for ToyTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyTask::Copy => "copy",
            ToyTask::Reverse => "reverse",
            ToyTask::Sort => "sort",
        })
    }
}

impl ToyTask {
    pub fn target(self, src: &[usize]) -> Vec<usize> {
        let mut t = src.to_vec();
        match self {
            ToyTask::Copy => {}
            ToyTask::Reverse => t.reverse(),
            ToyTask::Sort => t.sort_unstable(),
        }
        t
    }
}

/// `count` pairs with source lengths drawn from `len_range` and symbols
/// drawn from the non-special ids below `vocab`.
pub fn generate_toy_task(
    kind: ToyTask,
    count: usize,
    len_range: RangeInclusive<usize>,
    vocab: usize,
    seed: u64,
) -> Result<Corpus> {
    if vocab <= RESERVED_TOKENS {
        return Err(Error::config(format!(
            "toy vocabulary {vocab} leaves no room beyond the {RESERVED_TOKENS} special tokens"
        )));
    }
    if *len_range.start() == 0 || len_range.is_empty() {
        return Err(Error::config(format!("invalid length range {len_range:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..count)
        .map(|_| {
            let len = rng.gen_range(len_range.clone());
            let src: Vec<usize> = (0..len).map(|_| rng.gen_range(RESERVED_TOKENS..vocab)).collect();
            let tgt = kind.target(&src);
            Example::new(src, tgt)
        })
        .collect();
    Corpus::new(pairs, Vocab::synthetic(vocab))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Reads line-aligned source and target files and builds a joint
/// vocabulary ordered by descending frequency, ties broken by token.
pub fn load_parallel_corpus(src_path: &Path, tgt_path: &Path) -> Result<Corpus> {
    let (src, tgt) = read_aligned(src_path, tgt_path)?;
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for line in src.iter().chain(&tgt) {
        for tok in line.split_whitespace() {
            *freq.entry(tok).or_default() += 1;
        }
    }
    let mut by_freq: Vec<(&str, usize)> = freq.into_iter().collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let vocab = Vocab::from_tokens(by_freq.into_iter().map(|(t, _)| t));
    encode_lines(&src, &tgt, vocab)
}

/// Like [`load_parallel_corpus`] but maps tokens through an existing
/// vocabulary; unseen tokens become `<unk>`.
pub fn load_parallel_corpus_with_vocab(src_path: &Path, tgt_path: &Path, vocab: &Vocab) -> Result<Corpus> {
    let (src, tgt) = read_aligned(src_path, tgt_path)?;
    encode_lines(&src, &tgt, vocab.clone())
}

fn read_aligned(src_path: &Path, tgt_path: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::data(format!(
            "{} has {} lines but {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    Ok((src, tgt))
}

fn encode_lines(src: &[String], tgt: &[String], vocab: Vocab) -> Result<Corpus> {
    let mut pairs = Vec::with_capacity(src.len());
    for (i, (s, t)) in src.iter().zip(tgt).enumerate() {
        let e = Example::new(vocab.encode(s), vocab.encode(t));
        if e.src.is_empty() || e.tgt.is_empty() {
            return Err(Error::data(format!("line {} has an empty side", i + 1)));
        }
        pairs.push(e);
    }
    Corpus::new(pairs, vocab)
}

/// Seeded shuffle of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::text::UNK;

    #[test]
    fn toy_targets() {
        assert_eq!(ToyTask::Copy.target(&[5, 7]), vec![5, 7]);
        assert_eq!(ToyTask::Reverse.target(&[5, 7, 9]), vec![9, 7, 5]);
        assert_eq!(ToyTask::Sort.target(&[9, 5, 7]), vec![5, 7, 9]);
    }

    #[test]
    fn toy_corpus_is_seeded_and_in_range() {
        let a = generate_toy_task(ToyTask::Reverse, 50, 1..=8, 20, 3).unwrap();
        let b = generate_toy_task(ToyTask::Reverse, 50, 1..=8, 20, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        let c = generate_toy_task(ToyTask::Reverse, 50, 1..=8, 20, 4).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
        for p in &a.pairs {
            assert!((1..=8).contains(&p.src.len()));
            assert!(p.src.iter().all(|&t| (RESERVED_TOKENS..20).contains(&t)));
        }
        assert!(generate_toy_task(ToyTask::Copy, 1, 1..=2, 4, 0).is_err());
    }

    #[test]
    fn parallel_files() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("s.txt"), dir.path().join("t.txt"));
        std::fs::write(&s, "a b c\nb c\n").unwrap();
        std::fs::write(&t, "x y\nb  x\n").unwrap();
        let c = load_parallel_corpus(&s, &t).unwrap();
        assert_eq!(c.len(), 2);
        // b:3, c:2, x:2, a:1, y:1 -> ids 4, 5, 6, 7, 8
        assert_eq!(c.vocab.id("b"), 4);
        assert_eq!(c.vocab.id("c"), 5);
        assert_eq!(c.vocab.id("x"), 6);
        assert_eq!(c.vocab.decode(&c.pairs[1].tgt).unwrap(), "b x");
        assert_eq!(c.vocab.id("never"), UNK);

        std::fs::write(&t, "x y\n").unwrap();
        let err = load_parallel_corpus(&s, &t).unwrap_err().to_string();
        assert!(err.contains("2 lines") && err.contains("has 1"), "{err}");

        std::fs::write(&t, "x\n\n").unwrap();
        assert!(matches!(load_parallel_corpus(&s, &t), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn detokenized_source_round_trips(lines in prop::collection::vec("[a-z]{1,4}( {1,3}[a-z]{1,4}){0,5}", 1..6)) {
            let dir = tempfile::tempdir().unwrap();
            let (s, t) = (dir.path().join("s"), dir.path().join("t"));
            std::fs::write(&s, lines.join("\n")).unwrap();
            std::fs::write(&t, lines.join("\n")).unwrap();
            let c = load_parallel_corpus(&s, &t).unwrap();
            for (p, line) in c.pairs.iter().zip(&lines) {
                let normalized = line.split_whitespace().collect::<Vec<_>>().join(" ");
                prop_assert_eq!(c.vocab.decode(&p.src).unwrap(), normalized);
            }
        }
    }
}
