//! densetrace executes a decoder-only transformer as an explicit graph of
//! additive edges, extracts importance-thresholded traces, evaluates their
//! faithfulness under zero-ablation, and integrates the size/error trade-off
//! into a per-input computation-density score.

pub mod density;
pub mod error;
pub mod graph;
pub mod fixture;
pub mod masked;
pub mod metrics;
pub mod model;
pub mod report;
pub mod stats;
pub mod trace;

pub use error::{Error, Result};
pub use model::{
    forward_dense, generate, nucleus_sample, Activation, Distribution, Model, ModelConfig,
    ModelDir, TensorContainer, TokenSequence, Tokenizer,
};
