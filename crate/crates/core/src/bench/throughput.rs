use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use super::decode::{beam_search, greedy_search, ModelScorer};
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::training::Corpus;

/// Held for the duration of a measurement; concurrent measurements would
/// contend for the same cores and skew each other.
static MEASURING: Mutex<()> = Mutex::new(());

/// Output budget per sentence: twice the source plus slack, capped by the
/// model's positional range.
pub fn output_budget(src_len: usize) -> usize {
    2 * src_len + 4
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThroughputReport {
    pub config_id: String,
    pub batch_size: usize,
    pub beam: usize,
    pub tokens_per_sec_mean: f64,
    /// Sample standard deviation over `runs`.
    pub tokens_per_sec_std: f64,
    pub runs: usize,
    pub n_batches: usize,
    /// Generated tokens (excluding `</s>`) per full-corpus decode.
    pub tokens: usize,
    pub samples: Vec<f64>,
}

/// Decodes the whole corpus in batches; returns the outputs.
pub fn decode_corpus(model: &TransformerModel, corpus: &Corpus, batch_size: usize, beam: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut out = Vec::with_capacity(corpus.len());
    for chunk in corpus.pairs.chunks(batch_size) {
        let sources: Vec<Vec<usize>> = chunk.iter().map(|e| e.src.clone()).collect();
        let scorer = ModelScorer::new(model, &sources)?;
        let caps: Vec<usize> = sources
            .iter()
            .enumerate()
            .map(|(i, s)| scorer.output_limit(i, output_budget(s.len())))
            .collect();
        out.extend(if beam <= 1 {
            greedy_search(&scorer, &caps)?
        } else {
            beam_search(&scorer, beam, &caps)?
        });
    }
    Ok(out)
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Tokens per second of full-corpus decoding, after one untimed warmup run.
/// Refuses to overlap with another measurement in the same process.
pub fn measure_throughput(
    config_id: &str,
    model: &TransformerModel,
    corpus: &Corpus,
    batch_size: usize,
    beam: usize,
    runs: usize,
) -> Result<ThroughputReport> {
    if corpus.is_empty() {
        return Err(Error::data("throughput corpus is empty"));
    }
    if runs < 2 {
        return Err(Error::config("throughput needs at least two timed runs"));
    }
    let _guard = MEASURING
        .try_lock()
        .map_err(|_| Error::Precondition("another throughput measurement is running".into()))?;
    let tokens: usize = decode_corpus(model, corpus, batch_size, beam)?.iter().map(Vec::len).sum();
    if tokens == 0 {
        return Err(Error::numeric("model generated no tokens; throughput is undefined"));
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        let out = decode_corpus(model, corpus, batch_size, beam)?;
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        std::hint::black_box(&out);
        samples.push(tokens as f64 / secs);
    }
    let (mean, std) = mean_std(&samples);
    Ok(ThroughputReport {
        config_id: config_id.to_string(),
        batch_size,
        beam,
        tokens_per_sec_mean: mean,
        tokens_per_sec_std: std,
        runs,
        n_batches: corpus.len().div_ceil(batch_size),
        tokens,
        samples,
    })
}

/// One row of a batch-size sweep; `delta_pct` is set on every model but
/// the first, relative to the first at the same batch size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepEntry {
    pub report: ThroughputReport,
    pub delta_pct: Option<f64>,
}

/// Measures every model at every batch size, in model order within each
/// batch size.
pub fn batch_size_sweep(
    models: &[(&str, &TransformerModel)],
    batch_sizes: &[usize],
    corpus: &Corpus,
    beam: usize,
    runs: usize,
) -> Result<Vec<SweepEntry>> {
    if models.is_empty() {
        return Err(Error::config("batch-size sweep needs at least one model"));
    }
    if let Some(bad) = batch_sizes.iter().find(|&&b| b == 0) {
        return Err(Error::config(format!("invalid batch size {bad}")));
    }
    let mut rows = Vec::with_capacity(models.len() * batch_sizes.len());
    for &bs in batch_sizes {
        let mut reference = None;
        for &(id, model) in models {
            let r = measure_throughput(id, model, corpus, bs, beam, runs)?;
            let delta = reference.map(|base: f64| 100.0 * (r.tokens_per_sec_mean - base) / base);
            reference.get_or_insert(r.tokens_per_sec_mean);
            rows.push(SweepEntry {
                report: r,
                delta_pct: delta,
            });
        }
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str = "config,batch_size,tokens_per_sec,std,delta_pct,n_batches";

/// Table with a `delta_pct` column (empty on the reference rows), or
/// without it when only one model was measured.
pub fn batch_sweep_csv(rows: &[SweepEntry]) -> String {
    let with_delta = rows.iter().any(|r| r.delta_pct.is_some());
    let mut s = if with_delta {
        format!("{SWEEP_CSV_HEADER}\n")
    } else {
        "config,batch_size,tokens_per_sec,std,n_batches\n".to_string()
    };
    for r in rows {
        let t = &r.report;
        let delta = if with_delta {
            format!("{},", r.delta_pct.map(|d| format!("{d:.2}")).unwrap_or_default())
        } else {
            String::new()
        };
        s.push_str(&format!(
            "{},{},{:.2},{:.2},{delta}{}\n",
            t.config_id, t.batch_size, t.tokens_per_sec_mean, t.tokens_per_sec_std, t.n_batches
        ));
    }
    s
}
