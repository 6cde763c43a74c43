//! Dense reverse-mode automatic differentiation with the layers needed for
//! graph-based actor-critic models: affine maps, MLPs, layer normalization,
//! multi-head graph attention, scalar encoders, Adam, and JSON checkpoints.
//!
//! All arithmetic is `f64` and single-threaded; reductions run in a fixed
//! order so results are bit-reproducible.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{GraphAttention, GraphAttnDims, GraphBatch, GraphBuilder, GraphEncoder};
pub use layers::{LayerNorm, Linear, Mlp, ScalarEncoder};
pub use optim::{clip_grad_norm, Adam, AdamState};
pub use params::{Bound, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput([usize; 2]),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
