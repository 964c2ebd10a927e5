use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::cka::Matrix;
use crate::error::{Error, Result};
use crate::model::{Side, Taps, TransformerModel};
use crate::numeric::Tensor;
use crate::training::Corpus;

const DUMP_MAGIC: &[u8; 4] = b"WFNA";

/// Sentence-level module outputs: one token-mean row per sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    pub module_name: String,
    pub model_id: String,
    /// Content hash of the corpus the rows were computed on.
    pub corpus_hash: String,
    pub n: usize,
    pub d: usize,
    /// Row-major `n × d`.
    pub values: Vec<f32>,
}

/// Tap name to activations, in execution order.
pub type ActivationSet = IndexMap<String, ActivationMatrix>;

impl ActivationMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.n,
            cols: self.d,
            data: self.values.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        for s in [&self.model_id, &self.corpus_hash, &self.module_name] {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.d as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let model_id = read_string(r)?;
        let corpus_hash = read_string(r)?;
        let module_name = read_string(r)?;
        let (n, d) = (read_u64(r)?, read_u64(r)?);
        // Byte count must fit the address space (4 GiB cap on 64-bit).
        let bytes_len = n
            .checked_mul(d)
            .filter(|&l| l <= 1 << 30)
            .and_then(|l| usize::try_from(l * 4).ok())
            .ok_or_else(|| Error::Format(format!("implausible activation shape {n}x{d}")))?;
        let (n, d) = (n as usize, d as usize);
        let mut bytes = vec![0u8; bytes_len];
        read_exact(r, &mut bytes)?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Ok(ActivationMatrix {
            module_name,
            model_id,
            corpus_hash,
            n,
            d,
            values,
        })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("activation dump is truncated".into()),
        _ => Error::Io(e),
    })
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    let len = u32::from_le_bytes(b) as usize;
    if len > 1 << 16 {
        return Err(Error::Format(format!("header string of {len} bytes")));
    }
    let mut s = vec![0u8; len];
    read_exact(r, &mut s)?;
    String::from_utf8(s).map_err(|_| Error::Format("header string is not UTF-8".into()))
}

/// Writes every matrix of `set`: magic, record count, then one header plus
/// little-endian f32 payload per module.
pub fn write_activations(path: &Path, set: &ActivationSet) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DUMP_MAGIC);
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for m in set.values() {
        m.write_to(&mut buf)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_activations(path: &Path) -> Result<ActivationSet> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Format(format!("{} is not an activation dump", path.display())));
    }
    let mut count = [0u8; 4];
    read_exact(&mut r, &mut count)?;
    let mut set = ActivationSet::new();
    for _ in 0..u32::from_le_bytes(count) {
        let m = ActivationMatrix::read_from(&mut r)?;
        set.insert(m.module_name.clone(), m);
    }
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes in activation dump", r.len())));
    }
    Ok(set)
}

fn mean_rows(t: &Tensor, from: usize) -> Vec<f32> {
    let cols = t.cols();
    let mut acc = vec![0.0f64; cols];
    for r in from..t.rows() {
        for (a, &v) in acc.iter_mut().zip(t.row(r)) {
            *a += v as f64;
        }
    }
    let count = (t.rows() - from) as f64;
    acc.into_iter().map(|a| (a / count) as f32).collect()
}

/// Runs the model (no dropout) over every sentence and averages each tap
/// over the sentence's tokens.
///
/// Encoder side: the framed source. Decoder side: the reference forced
/// through the decoder (`<s> tgt`); for decoder-only models these are the
/// target positions after the source prefix.
pub fn collect_activations(
    model: &TransformerModel,
    model_id: &str,
    corpus: &Corpus,
    side: Side,
) -> Result<ActivationSet> {
    if corpus.is_empty() {
        return Err(Error::data("cannot collect activations over an empty corpus"));
    }
    let hash = corpus.content_hash();
    let mut rows: IndexMap<String, Vec<f32>> = IndexMap::new();
    let mut dims: IndexMap<String, usize> = IndexMap::new();
    for ex in &corpus.pairs {
        let src = ex.encoder_input();
        let (taps, from): (Taps, usize) = match (side, model.is_decoder_only()) {
            (Side::Encoder, false) => (model.encoder_forward(&src)?.1, 0),
            (Side::Encoder, true) => {
                return Err(Error::Precondition("decoder-only models have no encoder taps".into()))
            }
            (Side::Decoder, false) => {
                let (enc, _) = model.encoder_forward(&src)?;
                (model.decoder_forward(Some(&enc), &ex.decoder_input())?.1, 0)
            }
            (Side::Decoder, true) => (model.prefix_lm_forward(&src, &ex.decoder_input())?.1, src.len()),
        };
        for (name, t) in &taps {
            dims.insert(name.clone(), t.cols());
            rows.entry(name.clone()).or_default().extend(mean_rows(t, from));
        }
    }
    Ok(rows
        .into_iter()
        .map(|(name, values)| {
            let d = dims[&name];
            let m = ActivationMatrix {
                module_name: name.clone(),
                model_id: model_id.to_string(),
                corpus_hash: hash.clone(),
                n: corpus.len(),
                d,
                values,
            };
            (name, m)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig, Preset};
    use crate::training::{generate_toy_task, ToyTask};

    fn setup() -> (TransformerModel, Corpus) {
        let c = Preset::Baseline.apply(&ModelConfig::tiny(2, 2, 8, 2, 12)).unwrap();
        (build_model(&c, 1).unwrap(), generate_toy_task(ToyTask::Copy, 6, 1..=4, 12, 2).unwrap())
    }

    #[test]
    fn shapes_and_tap_names() {
        let (m, corpus) = setup();
        let enc = collect_activations(&m, "a", &corpus, Side::Encoder).unwrap();
        assert_eq!(enc.keys().collect::<Vec<_>>(), ["0.sa", "0.ffn", "1.sa", "1.ffn"]);
        assert!(enc.values().all(|a| a.n == 6 && a.d == 8 && a.values.len() == 48));
        let dec = collect_activations(&m, "a", &corpus, Side::Decoder).unwrap();
        assert_eq!(dec.len(), 6);
        let one = collect_activations(&m, "a", &corpus.take(1), Side::Encoder).unwrap();
        assert!(one.values().all(|a| a.n == 1));
        assert!(collect_activations(&m, "a", &corpus.take(0), Side::Encoder).is_err());
    }

    #[test]
    fn rows_are_token_means_and_deterministic() {
        let (m, corpus) = setup();
        let a = collect_activations(&m, "a", &corpus, Side::Encoder).unwrap();
        assert_eq!(a, collect_activations(&m, "a", &corpus, Side::Encoder).unwrap());
        let (_, taps) = m.encoder_forward(&corpus.pairs[2].encoder_input()).unwrap();
        let t = &taps["1.ffn"];
        for c in 0..8 {
            let mean: f32 = (0..t.rows()).map(|r| t.row(r)[c]).sum::<f32>() / t.rows() as f32;
            assert!((a["1.ffn"].row(2)[c] - mean).abs() < 1e-5);
        }
    }

    #[test]
    fn decoder_only_uses_target_positions() {
        let mut c = ModelConfig::decoder_only_big(12);
        c.n_dec = 1;
        c.d_model = 8;
        c.d_ff = 16;
        c.d_ff_shared = 16;
        c.heads = 2;
        c.max_len = 32;
        c.dropout = 0.0;
        let m = build_model(&c, 1).unwrap();
        let (_, corpus) = setup();
        assert!(collect_activations(&m, "d", &corpus, Side::Encoder).is_err());
        let dec = collect_activations(&m, "d", &corpus, Side::Decoder).unwrap();
        let ex = &corpus.pairs[0];
        let src = ex.encoder_input();
        let (_, taps) = m.prefix_lm_forward(&src, &ex.decoder_input()).unwrap();
        assert_eq!(dec["0.ffn"].row(0), mean_rows(&taps["0.ffn"], src.len()).as_slice());
    }

    #[test]
    fn dump_round_trip_and_corruption() {
        let (m, corpus) = setup();
        let set = collect_activations(&m, "model-a", &corpus, Side::Decoder).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.bin");
        write_activations(&path, &set).unwrap();
        assert_eq!(read_activations(&path).unwrap(), set);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_activations(&path), Err(Error::Format(_))));
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(read_activations(&path), Err(Error::Format(_))));
    }
}
