//! Decoding, decoding-speed measurement and BLEU.

mod bleu;
mod decode;
mod throughput;

pub use bleu::{corpus_bleu, corpus_bleu_tokens};
pub use decode::{beam_search, decode_beam, decode_greedy, greedy_search, sequence_score, ModelScorer, Scorer};
pub use throughput::{
    batch_size_sweep, batch_sweep_csv, decode_corpus, measure_throughput, output_budget, SweepEntry, ThroughputReport,
    SWEEP_CSV_HEADER,
};
