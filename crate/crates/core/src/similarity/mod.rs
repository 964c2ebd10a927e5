//! Representational similarity between module outputs.

mod activations;
mod cka;
mod neighbors;
mod report;

pub use activations::{collect_activations, read_activations, write_activations, ActivationMatrix, ActivationSet};
pub use cka::{linear_cka, Matrix};
pub use neighbors::{default_k, knn, lns};
pub use report::{normalize_against_benchmark, pairwise_layer_similarity, self_similarity, Heatmap, Metric, SimilarityReport};
