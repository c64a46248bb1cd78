//! Numerical substrate: dense `f64` tensors, a reverse-mode tape, layers,
//! Adam, finite-difference gradient checking and the checkpoint container.
//!
//! All arithmetic is 64-bit and every reduction runs in a fixed order, so a
//! forward/backward pass is bit-reproducible for fixed inputs and weights.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod param;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{check_gradients, gradcheck, BlockReport, GradcheckOptions, GradcheckReport};
pub use graph::{Graph, Var};
pub use layers::{
    attention_mask, sinusoidal_positions, AttentionConfig, BatchNorm, Conv2d, Embedding, FeedForward,
    LayerNorm, Linear, MultiHeadAttention, TransformerBlock,
};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch norm in train mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid attention config: model_dim {model_dim} not divisible by {head_count} heads")]
    InvalidAttention { model_dim: usize, head_count: usize },
    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),
    #[error("unknown parameter block `{0}`")]
    UnknownBlock(String),
    #[error("duplicate parameter block `{0}`")]
    DuplicateBlock(String),
    #[error("checkpoint I/O: {0}")]
    Io(String),
}
