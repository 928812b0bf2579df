//! Transformer backbone: patch embeddings, encoder, causal decoder and the
//! velocity denoiser.

mod config;
mod model;

pub use config::ModelConfig;
pub use model::{time_features, Backbone, Bound, PatchVelocity, Stream, TIME_FEATURES, TIME_FREQUENCIES};
