//! Optimizer, schedule, data and the training loop.

mod adam;
mod corpus;
mod schedule;
mod sweep;
mod trainer;

pub use adam::Adam;
pub use corpus::{
    generate_toy_task, load_parallel_corpus, load_parallel_corpus_with_vocab, shuffled_indices, Corpus, ToyTask,
};
pub use schedule::Schedule;
pub use sweep::{ffn_dim_sweep, sweep_csv, with_side_width, SweepRow};
pub use trainer::{evaluate, token_accuracy, train, train_with_optimizer, TrainOptions, TrainReport};
