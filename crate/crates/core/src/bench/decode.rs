use crate::error::{Error, Result};
use crate::model::{argmax, EncodedSource, TransformerModel};
use crate::text::{BOS, EOS};

/// Next-token distributions for partial hypotheses over a fixed batch of
/// sources.
pub trait Scorer {
    /// `log p(· | source[h], prefix[h])` for every hypothesis `h`. Prefixes
    /// start with `<s>`.
    fn next_log_probs(&self, sources: &[usize], prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f32>>>;
}

/// Scores hypotheses with a model, encoding the sources once.
pub struct ModelScorer<'m> {
    model: &'m TransformerModel,
    framed: Vec<Vec<usize>>,
    memory: Option<EncodedSource>,
}

impl<'m> ModelScorer<'m> {
    /// `sources` are raw token ids; `</s>` is appended here.
    pub fn new(model: &'m TransformerModel, sources: &[Vec<usize>]) -> Result<Self> {
        let framed: Vec<Vec<usize>> = sources
            .iter()
            .map(|s| s.iter().copied().chain([EOS]).collect())
            .collect();
        let memory = if model.is_decoder_only() {
            None
        } else {
            Some(model.encode_batch(&framed)?)
        };
        Ok(ModelScorer { model, framed, memory })
    }

    /// Longest output that still fits the model's positional range.
    pub fn output_limit(&self, source: usize, wanted: usize) -> usize {
        let max_len = self.model.config().max_len;
        let room = if self.model.is_decoder_only() {
            max_len.saturating_sub(self.framed[source].len() + 1)
        } else {
            max_len.saturating_sub(1)
        };
        wanted.min(room).max(1)
    }
}

impl Scorer for ModelScorer<'_> {
    fn next_log_probs(&self, sources: &[usize], prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f32>>> {
        match &self.memory {
            Some(m) => self.model.next_token_log_probs(Some(&m.select(sources)?), &[], prefixes),
            None => {
                let srcs: Vec<Vec<usize>> = sources.iter().map(|&s| self.framed[s].clone()).collect();
                self.model.next_token_log_probs(None, &srcs, prefixes)
            }
        }
    }
}

/// Greedy decoding of every source at once. Outputs exclude `<s>` and
/// `</s>`; a source stops at `</s>` or after `max_lens[s]` tokens.
pub fn greedy_search(scorer: &impl Scorer, max_lens: &[usize]) -> Result<Vec<Vec<usize>>> {
    let n = max_lens.len();
    let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; n];
    let mut done: Vec<bool> = max_lens.iter().map(|&m| m == 0).collect();
    loop {
        let live: Vec<usize> = (0..n).filter(|&s| !done[s]).collect();
        if live.is_empty() {
            break;
        }
        let batch: Vec<Vec<usize>> = live.iter().map(|&s| prefixes[s].clone()).collect();
        let lp = scorer.next_log_probs(&live, &batch)?;
        for (&s, dist) in live.iter().zip(&lp) {
            let tok = argmax(dist);
            if tok == EOS {
                done[s] = true;
            } else {
                prefixes[s].push(tok);
                done[s] = prefixes[s].len() > max_lens[s];
            }
        }
    }
    Ok(prefixes.into_iter().map(|p| p[1..].to_vec()).collect())
}

#[derive(Clone, Debug, PartialEq)]
struct Hypothesis {
    /// Generated tokens after `<s>`, including a final `</s>` once finished.
    tokens: Vec<usize>,
    log_prob: f64,
}

impl Hypothesis {
    /// Length-normalized log-probability.
    fn score(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }

    fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    fn output(&self) -> Vec<usize> {
        self.tokens.iter().copied().filter(|&t| t != EOS).collect()
    }
}

/// Length-normalized score (sum of log-probabilities over generated tokens,
/// `</s>` included when present) of a fixed output under `scorer`.
pub fn sequence_score(scorer: &impl Scorer, source: usize, output: &[usize], finished: bool) -> Result<f64> {
    let mut seq = vec![BOS];
    seq.extend_from_slice(output);
    let steps = output.len() + usize::from(finished);
    let prefixes: Vec<Vec<usize>> = (1..=steps).map(|i| seq[..i].to_vec()).collect();
    if prefixes.is_empty() {
        return Ok(0.0);
    }
    let lp = scorer.next_log_probs(&vec![source; steps], &prefixes)?;
    let next = output.iter().copied().chain(finished.then_some(EOS));
    let total: f64 = lp.iter().zip(next).map(|(d, t)| d[t] as f64).sum();
    Ok(total / steps as f64)
}

/// Beam search over every source at once. Each step keeps the `beam` best
/// expansions per source; expansions ending in `</s>` leave the beam as
/// finished hypotheses. The result is the finished (or, at the length cap,
/// live) hypothesis with the best length-normalized log-probability.
pub fn beam_search(scorer: &impl Scorer, beam: usize, max_lens: &[usize]) -> Result<Vec<Vec<usize>>> {
    if beam == 0 {
        return Err(Error::config("beam size must be at least 1"));
    }
    let n = max_lens.len();
    let mut live: Vec<Vec<Hypothesis>> = (0..n)
        .map(|s| {
            if max_lens[s] == 0 {
                Vec::new()
            } else {
                vec![Hypothesis {
                    tokens: Vec::new(),
                    log_prob: 0.0,
                }]
            }
        })
        .collect();
    let mut finished: Vec<Vec<Hypothesis>> = vec![Vec::new(); n];
    loop {
        let mut owners = Vec::new();
        let mut prefixes = Vec::new();
        for (s, hyps) in live.iter().enumerate() {
            for h in hyps {
                owners.push(s);
                prefixes.push(std::iter::once(BOS).chain(h.tokens.iter().copied()).collect::<Vec<_>>());
            }
        }
        if owners.is_empty() {
            break;
        }
        let lp = scorer.next_log_probs(&owners, &prefixes)?;
        let mut offset = 0;
        for s in 0..n {
            let hyps = std::mem::take(&mut live[s]);
            if hyps.is_empty() {
                continue;
            }
            // (log_prob, hypothesis index, token); ties favor earlier
            // hypotheses and lower token ids, matching greedy argmax.
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (hi, h) in hyps.iter().enumerate() {
                for (tok, &p) in lp[offset + hi].iter().enumerate() {
                    cands.push((h.log_prob + p as f64, hi, tok));
                }
            }
            offset += hyps.len();
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            for &(log_prob, hi, tok) in cands.iter().take(beam) {
                let mut tokens = hyps[hi].tokens.clone();
                tokens.push(tok);
                let h = Hypothesis { tokens, log_prob };
                if h.finished() {
                    finished[s].push(h);
                } else if h.tokens.len() >= max_lens[s] {
                    // Length cap: keep as a candidate without `</s>`.
                    finished[s].push(h);
                } else {
                    live[s].push(h);
                }
            }
        }
    }
    Ok(finished
        .into_iter()
        .map(|hyps| {
            hyps.into_iter()
                .enumerate()
                // Earliest wins ties, so a width-1 beam is exactly greedy.
                .max_by(|(i, a), (j, b)| a.score().total_cmp(&b.score()).then(j.cmp(i)))
                .map(|(_, h)| h.output())
                .unwrap_or_default()
        })
        .collect())
}

/// Greedy translation of one raw source (no `</s>`), at most `max_len` tokens.
pub fn decode_greedy(model: &TransformerModel, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::config("max_len must be at least 1"));
    }
    let scorer = ModelScorer::new(model, &[src.to_vec()])?;
    let cap = scorer.output_limit(0, max_len);
    Ok(greedy_search(&scorer, &[cap])?.remove(0))
}

/// Beam-search translation of one raw source.
pub fn decode_beam(model: &TransformerModel, src: &[usize], beam: usize, max_len: usize) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::config("max_len must be at least 1"));
    }
    let scorer = ModelScorer::new(model, &[src.to_vec()])?;
    let cap = scorer.output_limit(0, max_len);
    Ok(beam_search(&scorer, beam, &[cap])?.remove(0))
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::model::{build_model, ModelConfig, Preset};

    /// Log-probabilities looked up by prefix; unknown prefixes emit `</s>`.
    struct Table {
        vocab: usize,
        rows: HashMap<Vec<usize>, Vec<f32>>,
    }

    impl Table {
        fn with(mut self, prefix: &[usize], probs: &[(usize, f32)]) -> Self {
            let mut p = vec![1e-9f32; self.vocab];
            for &(t, v) in probs {
                p[t] = v;
            }
            self.rows.insert(prefix.to_vec(), p.iter().map(|v| v.ln()).collect());
            self
        }
    }

    impl Scorer for Table {
        fn next_log_probs(&self, _: &[usize], prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f32>>> {
            Ok(prefixes
                .iter()
                .map(|p| {
                    self.rows.get(p).cloned().unwrap_or_else(|| {
                        let mut r = vec![-30.0; self.vocab];
                        r[EOS] = 0.0;
                        r
                    })
                })
                .collect())
        }
    }

    fn table() -> Table {
        Table {
            vocab: 8,
            rows: HashMap::new(),
        }
    }

    #[test]
    fn eos_first_gives_empty_output_and_cap_holds() {
        let t = table();
        assert_eq!(greedy_search(&t, &[5]).unwrap(), vec![Vec::<usize>::new()]);
        let looping = table()
            .with(&[BOS], &[(4, 0.9)])
            .with(&[BOS, 4], &[(4, 0.9)])
            .with(&[BOS, 4, 4], &[(4, 0.9)])
            .with(&[BOS, 4, 4, 4], &[(4, 0.9)]);
        assert_eq!(greedy_search(&looping, &[3]).unwrap(), vec![vec![4, 4, 4]]);
        assert_eq!(beam_search(&looping, 3, &[3]).unwrap(), vec![vec![4, 4, 4]]);
    }

    #[test]
    fn beam_finds_what_greedy_misses() {
        // Greedy takes 4 (0.6) then is stuck with 0.3-probability endings;
        // 5 (0.4) leads to a near-certain `</s>`.
        let t = table()
            .with(&[BOS], &[(4, 0.6), (5, 0.4)])
            .with(&[BOS, 4], &[(6, 0.3), (7, 0.3), (EOS, 0.3)])
            .with(&[BOS, 5], &[(EOS, 0.99)])
            .with(&[BOS, 4, 6], &[(EOS, 1.0)])
            .with(&[BOS, 4, 7], &[(EOS, 1.0)]);
        assert_eq!(greedy_search(&t, &[4]).unwrap()[0], vec![4]);
        // Exhaustive: every complete sequence with its normalized score.
        let seqs: [(&[usize], bool); 4] = [(&[4], true), (&[4, 6], true), (&[4, 7], true), (&[5], true)];
        let best = seqs
            .iter()
            .map(|(s, f)| (sequence_score(&t, 0, s, *f).unwrap(), s.to_vec()))
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap();
        assert_eq!(best.1, vec![5]);
        assert_eq!(beam_search(&t, 2, &[4]).unwrap()[0], vec![5]);
    }

    fn tiny_model(seed: u64, preset: Preset) -> TransformerModel {
        build_model(&preset.apply(&ModelConfig::tiny(1, 2, 8, 2, 10)).unwrap(), seed).unwrap()
    }

    #[test]
    fn width_one_beam_is_greedy() {
        for seed in 0..100 {
            let preset = [Preset::Baseline, Preset::NoDec, Preset::SharedEncDec][seed as usize % 3];
            let m = tiny_model(seed, preset);
            let src: Vec<usize> = (0..1 + seed as usize % 5).map(|i| 4 + (i * 7 + seed as usize) % 6).collect();
            assert_eq!(
                decode_beam(&m, &src, 1, 6).unwrap(),
                decode_greedy(&m, &src, 6).unwrap(),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn wider_beam_scores_at_least_greedy() {
        for seed in 0..20 {
            let m = tiny_model(seed, Preset::Baseline);
            let src = vec![4 + seed as usize % 6, 5];
            let scorer = ModelScorer::new(&m, std::slice::from_ref(&src)).unwrap();
            let score = |out: &[usize]| {
                let finished = out.len() < 6;
                sequence_score(&scorer, 0, out, finished).unwrap()
            };
            let g = decode_greedy(&m, &src, 6).unwrap();
            let b = decode_beam(&m, &src, 5, 6).unwrap();
            assert!(score(&b) >= score(&g) - 1e-6, "seed {seed}: {b:?} vs {g:?}");
        }
    }

    #[test]
    fn batched_greedy_matches_single() {
        let m = tiny_model(3, Preset::Baseline);
        let sources = vec![vec![4, 5, 6], vec![7], vec![8, 9]];
        let scorer = ModelScorer::new(&m, &sources).unwrap();
        let batched = greedy_search(&scorer, &[5, 5, 5]).unwrap();
        let beams = beam_search(&scorer, 3, &[5, 5, 5]).unwrap();
        for (i, s) in sources.iter().enumerate() {
            assert_eq!(batched[i], decode_greedy(&m, s, 5).unwrap());
            assert_eq!(beams[i], decode_beam(&m, s, 3, 5).unwrap());
        }
    }

    #[test]
    fn decoder_only_decodes_within_positions() {
        let mut c = ModelConfig::decoder_only_big(10);
        c.n_dec = 1;
        c.d_model = 8;
        c.d_ff = 16;
        c.d_ff_shared = 16;
        c.heads = 2;
        c.max_len = 8;
        c.dropout = 0.0;
        let m = build_model(&c, 1).unwrap();
        // Source frame takes 4 positions, `<s>` one more: at most 3 outputs.
        assert!(decode_greedy(&m, &[4, 5, 6], 20).unwrap().len() <= 3);
        assert!(decode_beam(&m, &[4, 5, 6], 3, 20).unwrap().len() <= 3);
    }

    #[test]
    fn deterministic_and_zero_limits_rejected() {
        let m = tiny_model(4, Preset::Baseline);
        assert_eq!(decode_beam(&m, &[4, 5], 4, 6).unwrap(), decode_beam(&m, &[4, 5], 4, 6).unwrap());
        assert!(decode_greedy(&m, &[4], 0).is_err());
        assert!(decode_beam(&m, &[4], 0, 3).is_err());
    }
}
