//! Transformer configuration, parameter tying and the forward pass.

mod assign;
pub mod checkpoint;
mod config;
mod plan;
mod store;
mod transformer;

pub use assign::resolve_ffn_assignment;
pub use config::{Architecture, AttnSharing, FfnSharing, ModelConfig, Preset, SharingSpec, Side};
pub use plan::{
    count_params, embed_site, site, Component, Init, ParamCount, ParamDelta, ParamPlan, PlannedTensor,
    ATTN_TENSORS, EMBEDDING, FFN_TENSORS, OUTPUT_PROJECTION,
};
pub use store::ParamStore;
pub use transformer::{
    argmax, build_model, check_model_gradients, log_softmax, positional_encoding, prefix_lm_allowed, prefix_lm_mask, BatchStats,
    EncodedSource, PaddedBatch, Taps, TransformerModel,
};
