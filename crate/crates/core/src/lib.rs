//! Toy-scale Transformer laboratory for studying how far the feed-forward
//! sublayers can be shared, dropped or widened.

pub mod bench;
pub mod error;
pub mod model;
pub mod numeric;
pub mod similarity;
pub mod text;
pub mod training;

pub use error::{Error, Result};
