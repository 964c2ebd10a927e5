use std::collections::{BTreeMap, HashMap};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Architecture, ModelConfig, Side};
use super::plan::{embed_site, site, ParamPlan, OUTPUT_PROJECTION};
use super::store::ParamStore;
use crate::error::{Error, Result};
use crate::numeric::{
    grad_check_piecewise, AttentionLayout, GradCheckOptions, GradCheckReport, Parameters, Tape, Tensor, Var,
};
use crate::text::{Example, PAD};

/// Sublayer outputs keyed `"{layer}.sa"`, `"{layer}.ca"`, `"{layer}.ffn"`,
/// in execution order. Layers without an FFN have no `ffn` entry.
pub type Taps = IndexMap<String, Tensor>;

/// Right-padded batch of token sequences, `batch * len` ids row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl PaddedBatch {
    pub fn new(seqs: &[Vec<usize>]) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
        }
        PaddedBatch {
            ids,
            lens: seqs.iter().map(Vec::len).collect(),
            batch: seqs.len(),
            len,
        }
    }
}

/// Whether position `i` may attend to position `j` in a sequence whose
/// first `prefix` positions form a bidirectional prefix and the rest are
/// causal.
pub fn prefix_lm_allowed(prefix: usize, i: usize, j: usize) -> bool {
    j < prefix || j <= i
}

/// `(src_len + tgt_len)²` visibility matrix of a prefix LM: source positions
/// see the whole source, target positions see the source and earlier
/// targets.
pub fn prefix_lm_mask(src_len: usize, tgt_len: usize) -> Vec<Vec<bool>> {
    let n = src_len + tgt_len;
    (0..n)
        .map(|i| (0..n).map(|j| prefix_lm_allowed(src_len, i, j)).collect())
        .collect()
}

/// Sinusoidal position table, `len × d`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f32> {
    let mut pe = vec![0.0f32; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10_000f64.powf(i as f64 / d as f64);
            pe[pos * d + i] = angle.sin() as f32;
            if i + 1 < d {
                pe[pos * d + i + 1] = angle.cos() as f32;
            }
        }
    }
    pe
}

/// Encoder output kept for cross-attention.
#[derive(Clone, Debug)]
pub struct EncodedSource {
    /// `batch * len × d_model`.
    pub states: Tensor,
    pub lens: Vec<usize>,
    pub len: usize,
}

impl EncodedSource {
    /// Row-gathers whole sources so hypothesis `h` sees source `rows[h]`.
    pub fn select(&self, rows: &[usize]) -> Result<EncodedSource> {
        let d = self.states.cols();
        let mut data = Vec::with_capacity(rows.len() * self.len * d);
        let mut lens = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.lens.len() {
                return Err(Error::Index {
                    what: "encoded batch",
                    index: r,
                    bound: self.lens.len(),
                });
            }
            data.extend_from_slice(&self.states.data()[r * self.len * d..(r + 1) * self.len * d]);
            lens.push(self.lens[r]);
        }
        Ok(EncodedSource {
            states: Tensor::new(vec![rows.len() * self.len, d], data)?,
            lens,
            len: self.len,
        })
    }
}

/// Teacher-forced statistics over non-pad target positions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    /// Mean token cross-entropy.
    pub loss: f32,
    pub correct: usize,
    pub tokens: usize,
}

/// Post-norm Transformer over a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    params: ParamStore,
    has_ffn: [bool; 2],
}

/// Builds a model whose parameters are drawn from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<TransformerModel> {
    let plan = ParamPlan::for_config(config)?;
    TransformerModel::from_parts(config.clone(), ParamStore::initialize(&plan, seed))
}

impl TransformerModel {
    /// Errors unless `params` has exactly the layout `config` plans.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let plan = ParamPlan::for_config(&config)?;
        params.check_plan(&plan)?;
        let has_ffn = [
            config.ffn_assignment(Side::Encoder)?.is_some(),
            config.ffn_assignment(Side::Decoder)?.is_some(),
        ];
        Ok(TransformerModel {
            config,
            params,
            has_ffn,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn is_decoder_only(&self) -> bool {
        self.config.architecture == Architecture::DecoderOnly
    }

    /// Encodes one source sequence (ids used verbatim) without dropout.
    pub fn encoder_forward(&self, src: &[usize]) -> Result<(Tensor, Taps)> {
        if self.is_decoder_only() {
            return Err(Error::Precondition("decoder-only models have no encoder".into()));
        }
        let mut g = Graph::new(self, None);
        let x = g.encode(&PaddedBatch::new(&[src.to_vec()]))?;
        let out = g.tape.value(x).clone();
        Ok((out, g.collect_taps(Side::Encoder)))
    }

    /// Runs the decoder over `tgt_prefix` and returns `len × vocab` logits.
    ///
    /// Encoder-decoder models need `enc_out` (one source, `src_len × d`);
    /// decoder-only models must not get one and treat `tgt_prefix` causally.
    pub fn decoder_forward(&self, enc_out: Option<&Tensor>, tgt_prefix: &[usize]) -> Result<(Tensor, Taps)> {
        let memory = match (self.is_decoder_only(), enc_out) {
            (true, Some(_)) => {
                return Err(Error::Precondition("decoder-only models take no encoder output".into()))
            }
            (false, None) => {
                return Err(Error::Precondition("encoder-decoder models need an encoder output".into()))
            }
            (true, None) => None,
            (false, Some(t)) => Some(EncodedSource {
                states: t.clone(),
                lens: vec![t.rows()],
                len: t.rows(),
            }),
        };
        let mut g = Graph::new(self, None);
        let memory = memory.map(|m| g.memory_const(&m));
        let logits = g.decode(memory, &PaddedBatch::new(&[tgt_prefix.to_vec()]), &[0])?;
        let out = g.tape.value(logits).clone();
        Ok((out, g.collect_taps(Side::Decoder)))
    }

    /// Decoder-only forward over `src ++ tgt_prefix` with a bidirectional
    /// prefix of `src.len()` positions.
    pub fn prefix_lm_forward(&self, src: &[usize], tgt_prefix: &[usize]) -> Result<(Tensor, Taps)> {
        if !self.is_decoder_only() {
            return Err(Error::Precondition("prefix-LM forward needs a decoder-only model".into()));
        }
        let mut seq = src.to_vec();
        seq.extend_from_slice(tgt_prefix);
        let mut g = Graph::new(self, None);
        let logits = g.decode(None, &PaddedBatch::new(&[seq]), &[src.len()])?;
        let out = g.tape.value(logits).clone();
        Ok((out, g.collect_taps(Side::Decoder)))
    }

    /// Encodes a batch of sources (ids used verbatim).
    pub fn encode_batch(&self, sources: &[Vec<usize>]) -> Result<EncodedSource> {
        let batch = PaddedBatch::new(sources);
        let mut g = Graph::new(self, None);
        let x = g.encode(&batch)?;
        Ok(EncodedSource {
            states: g.tape.value(x).clone(),
            lens: batch.lens,
            len: batch.len,
        })
    }

    /// Next-token log-probabilities for each hypothesis.
    ///
    /// Encoder-decoder: `memory` holds one encoded source per hypothesis and
    /// `prefixes[h]` is the decoder input so far. Decoder-only: `memory` is
    /// `None` and `sources[h]` is prepended as the bidirectional prefix.
    pub fn next_token_log_probs(
        &self,
        memory: Option<&EncodedSource>,
        sources: &[Vec<usize>],
        prefixes: &[Vec<usize>],
    ) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::new(self, None);
        let (batch, prefix_lens, last): (PaddedBatch, Vec<usize>, Vec<usize>) = if self.is_decoder_only() {
            if sources.len() != prefixes.len() {
                return Err(Error::Precondition("one source per hypothesis is required".into()));
            }
            let seqs: Vec<Vec<usize>> = sources
                .iter()
                .zip(prefixes)
                .map(|(s, p)| s.iter().chain(p).copied().collect())
                .collect();
            let last = seqs.iter().map(|s| s.len() - 1).collect();
            (PaddedBatch::new(&seqs), sources.iter().map(Vec::len).collect(), last)
        } else {
            let last = prefixes.iter().map(|p| p.len() - 1).collect();
            (PaddedBatch::new(prefixes), vec![0; prefixes.len()], last)
        };
        let memory = memory.map(|m| g.memory_const(m));
        let logits = g.decode(memory, &batch, &prefix_lens)?;
        let lt = g.tape.value(logits);
        Ok(last
            .iter()
            .enumerate()
            .map(|(b, &pos)| log_softmax(lt.row(b * batch.len + pos)))
            .collect())
    }

    /// Teacher-forced loss and accuracy, no dropout.
    pub fn evaluate_batch(&self, examples: &[Example]) -> Result<BatchStats> {
        let mut g = Graph::new(self, None);
        let (logits, labels) = g.teacher_forced(examples)?;
        let loss = g.tape.cross_entropy(logits, &labels, PAD)?;
        Ok(stats(&g.tape, loss, logits, &labels))
    }

    /// Teacher-forced loss and gradients for every physical tensor.
    /// `dropout_seed` enables dropout with a stream drawn from that seed.
    pub fn loss_and_grads(
        &self,
        examples: &[Example],
        dropout_seed: Option<u64>,
    ) -> Result<(BatchStats, BTreeMap<String, Vec<f32>>)> {
        let rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let mut g = Graph::new(self, rng);
        let (logits, labels) = g.teacher_forced(examples)?;
        let loss = g.tape.cross_entropy(logits, &labels, PAD)?;
        let s = stats(&g.tape, loss, logits, &labels);
        let grads = g.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, tensor) in self.params.iter() {
            let g = match g.bound.get(name) {
                Some(&v) => grads.get(v).map(<[f32]>::to_vec),
                None => None,
            };
            out.insert(name.to_string(), g.unwrap_or_else(|| vec![0.0; tensor.numel()]));
        }
        Ok((s, out))
    }
}

impl Parameters for TransformerModel {
    fn parameter_names(&self) -> Vec<String> {
        self.params.parameter_names()
    }

    fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.parameter_mut(name)
    }
}

/// Compares [`TransformerModel::loss_and_grads`] with central differences
/// of the teacher-forced loss on `examples`. Probes that flip any ReLU are
/// counted as straddled rather than compared.
pub fn check_model_gradients(
    model: &mut TransformerModel,
    examples: &[Example],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, analytic) = model.loss_and_grads(examples, None)?;
    grad_check_piecewise(
        model,
        &analytic,
        opts,
        |m| {
            let mut g = Graph::new(m, None);
            let (logits, labels) = g.teacher_forced(examples)?;
            let loss = g.tape.cross_entropy(logits, &labels, PAD)?;
            Ok((g.tape.value(loss).data()[0] as f64, g.tape.relu_pattern()))
        },
        |_, _| false,
    )
}

fn stats(tape: &Tape<'_>, loss: Var, logits: Var, labels: &[usize]) -> BatchStats {
    let lt = tape.value(logits);
    let mut correct = 0;
    let mut tokens = 0;
    for (r, &t) in labels.iter().enumerate() {
        if t == PAD {
            continue;
        }
        tokens += 1;
        if argmax(lt.row(r)) == t {
            correct += 1;
        }
    }
    BatchStats {
        loss: tape.value(loss).data()[0],
        correct,
        tokens,
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn log_softmax(row: &[f32]) -> Vec<f32> {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// One forward pass: a tape plus the parameter leaves bound so far.
struct Graph<'m> {
    model: &'m TransformerModel,
    tape: Tape<'m>,
    bound: HashMap<&'m str, Var>,
    rng: Option<ChaCha8Rng>,
    taps: [Vec<(String, Var)>; 2],
}

impl<'m> Graph<'m> {
    fn new(model: &'m TransformerModel, rng: Option<ChaCha8Rng>) -> Self {
        Graph {
            model,
            tape: Tape::new(),
            bound: HashMap::new(),
            rng,
            taps: [Vec::new(), Vec::new()],
        }
    }

    /// Binds each physical tensor once per tape so tied sites accumulate
    /// into a single gradient.
    fn param(&mut self, name: &str) -> Result<Var> {
        let model = self.model;
        let (physical, tensor) = model.params.entry(name)?;
        if let Some(&v) = self.bound.get(physical) {
            return Ok(v);
        }
        let v = self.tape.param(tensor);
        self.bound.insert(physical, v);
        Ok(v)
    }

    fn dropout(&mut self, x: Var) -> Var {
        let p = self.model.config.dropout;
        match self.rng.as_mut() {
            Some(rng) => self.tape.dropout(x, p, rng),
            None => x,
        }
    }

    fn tap(&mut self, side: Side, name: String, v: Var) {
        self.taps[side as usize].push((name, v));
    }

    fn collect_taps(&self, side: Side) -> Taps {
        self.taps[side as usize]
            .iter()
            .map(|(k, v)| (k.clone(), self.tape.value(*v).clone()))
            .collect()
    }

    fn linear(&mut self, x: Var, prefix: &str, w: &str, b: &str) -> Result<Var> {
        let wv = self.param(&format!("{prefix}.{w}"))?;
        let bv = self.param(&format!("{prefix}.{b}"))?;
        let y = self.tape.matmul(x, wv)?;
        self.tape.add_bias(y, bv)
    }

    /// Key projection. The key bias shifts every score in a query row by
    /// the same amount, which the softmax cancels.
    fn key_projection(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let wv = self.param(&format!("{prefix}.wk"))?;
        let bv = self.param(&format!("{prefix}.bk"))?;
        let y = self.tape.matmul(x, wv)?;
        self.tape.add_shift_invariant_bias(y, bv)
    }

    fn residual_norm(&mut self, x: Var, sub: Var, prefix: &str) -> Result<Var> {
        let sub = self.dropout(sub);
        let s = self.tape.add(x, sub)?;
        let gain = self.param(&format!("{prefix}.ln_gain"))?;
        let bias = self.param(&format!("{prefix}.ln_bias"))?;
        self.tape.layer_norm(s, gain, bias)
    }

    fn attention_sublayer(&mut self, prefix: &str, xq: Var, xkv: Var, layout: AttentionLayout) -> Result<Var> {
        let q = self.linear(xq, prefix, "wq", "bq")?;
        let k = self.key_projection(xkv, prefix)?;
        let v = self.linear(xkv, prefix, "wv", "bv")?;
        let a = self.tape.attention(q, k, v, layout)?;
        let o = self.linear(a, prefix, "wo", "bo")?;
        self.residual_norm(xq, o, prefix)
    }

    fn ffn_sublayer(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(x, prefix, "w1", "b1")?;
        let h = self.tape.relu(h);
        let o = self.linear(h, prefix, "w2", "b2")?;
        self.residual_norm(x, o, prefix)
    }

    fn embed(&mut self, side: Side, batch: &PaddedBatch) -> Result<Var> {
        let c = &self.model.config;
        if batch.len > c.max_len {
            return Err(Error::data(format!(
                "sequence length {} exceeds max_len {}",
                batch.len, c.max_len
            )));
        }
        if batch.len == 0 || batch.lens.contains(&0) {
            return Err(Error::data("empty sequence"));
        }
        let d = c.d_model;
        let table = self.param(&embed_site(side))?;
        let e = self.tape.embedding(table, &batch.ids)?;
        let e = self.tape.scale(e, (d as f32).sqrt());
        let pe = positional_encoding(batch.len, d);
        let mut pos = Vec::with_capacity(batch.batch * batch.len * d);
        for _ in 0..batch.batch {
            pos.extend_from_slice(&pe);
        }
        let pos = self.tape.constant(Tensor::new(vec![batch.batch * batch.len, d], pos)?);
        let x = self.tape.add(e, pos)?;
        Ok(self.dropout(x))
    }

    fn encode(&mut self, src: &PaddedBatch) -> Result<Var> {
        let c = self.model.config.clone();
        let mut x = self.embed(Side::Encoder, src)?;
        let mut mask = Vec::with_capacity(src.batch * src.len * src.len);
        for b in 0..src.batch {
            for _i in 0..src.len {
                mask.extend((0..src.len).map(|j| j < src.lens[b]));
            }
        }
        let layout = AttentionLayout {
            batch: src.batch,
            q_len: src.len,
            k_len: src.len,
            heads: c.heads,
            mask,
        };
        for layer in 0..c.n_enc {
            x = self.attention_sublayer(&site(Side::Encoder, layer, "self_attn"), x, x, layout.clone())?;
            self.tap(Side::Encoder, format!("{layer}.sa"), x);
            if self.model.has_ffn[0] {
                x = self.ffn_sublayer(&site(Side::Encoder, layer, "ffn"), x)?;
                self.tap(Side::Encoder, format!("{layer}.ffn"), x);
            }
        }
        Ok(x)
    }

    /// Returns `batch * len × vocab` logits.
    fn decode(&mut self, memory: Option<MemoryRef>, tgt: &PaddedBatch, prefix_lens: &[usize]) -> Result<Var> {
        let c = self.model.config.clone();
        let mut x = self.embed(Side::Decoder, tgt)?;
        debug_assert_eq!(prefix_lens.len(), tgt.batch);
        let mut mask = Vec::with_capacity(tgt.batch * tgt.len * tgt.len);
        for (&len, &prefix) in tgt.lens.iter().zip(prefix_lens) {
            for i in 0..tgt.len {
                mask.extend((0..tgt.len).map(|j| j < len && prefix_lm_allowed(prefix, i, j)));
            }
        }
        let self_layout = AttentionLayout {
            batch: tgt.batch,
            q_len: tgt.len,
            k_len: tgt.len,
            heads: c.heads,
            mask,
        };
        let cross = match memory {
            Some(m) => {
                if m.lens.len() != tgt.batch {
                    return Err(Error::Precondition(format!(
                        "{} encoded sources for {} target sequences",
                        m.lens.len(),
                        tgt.batch
                    )));
                }
                let mut mask = Vec::with_capacity(tgt.batch * tgt.len * m.len);
                for b in 0..tgt.batch {
                    for _i in 0..tgt.len {
                        mask.extend((0..m.len).map(|j| j < m.lens[b]));
                    }
                }
                let layout = AttentionLayout {
                    batch: tgt.batch,
                    q_len: tgt.len,
                    k_len: m.len,
                    heads: c.heads,
                    mask,
                };
                Some((m.states, layout))
            }
            None => None,
        };
        if cross.is_none() && c.architecture == Architecture::EncoderDecoder {
            return Err(Error::Precondition("encoder-decoder decoding needs encoder states".into()));
        }
        for layer in 0..c.n_dec {
            x = self.attention_sublayer(&site(Side::Decoder, layer, "self_attn"), x, x, self_layout.clone())?;
            self.tap(Side::Decoder, format!("{layer}.sa"), x);
            if let Some((mem, layout)) = &cross {
                x = self.attention_sublayer(&site(Side::Decoder, layer, "cross_attn"), x, *mem, layout.clone())?;
                self.tap(Side::Decoder, format!("{layer}.ca"), x);
            }
            if self.model.has_ffn[1] {
                x = self.ffn_sublayer(&site(Side::Decoder, layer, "ffn"), x)?;
                self.tap(Side::Decoder, format!("{layer}.ffn"), x);
            }
        }
        let out = self.param(OUTPUT_PROJECTION)?;
        self.tape.matmul_t(x, out)
    }

    /// Logits over every target position and their labels (PAD = ignore).
    fn teacher_forced(&mut self, examples: &[Example]) -> Result<(Var, Vec<usize>)> {
        if examples.is_empty() {
            return Err(Error::data("empty batch"));
        }
        if self.model.is_decoder_only() {
            let mut seqs = Vec::with_capacity(examples.len());
            let mut labels = Vec::with_capacity(examples.len());
            let mut prefixes = Vec::with_capacity(examples.len());
            for e in examples {
                let src = e.encoder_input();
                let mut seq = src.clone();
                seq.extend(e.decoder_input());
                let mut lab = vec![PAD; src.len()];
                lab.extend(e.decoder_target());
                prefixes.push(src.len());
                seqs.push(seq);
                labels.push(lab);
            }
            let batch = PaddedBatch::new(&seqs);
            let labels = PaddedBatch::new(&labels).ids;
            let logits = self.decode(None, &batch, &prefixes)?;
            Ok((logits, labels))
        } else {
            let src: Vec<_> = examples.iter().map(Example::encoder_input).collect();
            let tgt: Vec<_> = examples.iter().map(Example::decoder_input).collect();
            let labels: Vec<_> = examples.iter().map(Example::decoder_target).collect();
            let src = PaddedBatch::new(&src);
            let x = self.encode(&src)?;
            let memory = MemoryRef {
                states: x,
                lens: src.lens,
                len: src.len,
            };
            let logits = self.decode(Some(memory), &PaddedBatch::new(&tgt), &vec![0; examples.len()])?;
            Ok((logits, PaddedBatch::new(&labels).ids))
        }
    }

    /// Fixed encoder states as a constant leaf.
    fn memory_const(&mut self, m: &EncodedSource) -> MemoryRef {
        MemoryRef {
            states: self.tape.constant(m.states.clone()),
            lens: m.lens.clone(),
            len: m.len,
        }
    }
}

/// Encoder states on the current tape.
struct MemoryRef {
    states: Var,
    lens: Vec<usize>,
    len: usize,
}
