//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitive operations during the forward pass;
//! [`Tape::backward`] replays adjoints in reverse topological order.
//! Only what the Koopman training graphs need is implemented: matmul,
//! broadcast add, relu, norms, a differentiable linear solve, and a
//! couple of row-wise feature maps.

mod adamw;
mod checkpoint;
mod mlp;
mod tape;
mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, ParamRecord};
pub use mlp::{Activation, Linear, Mlp, MlpConfig, MlpVars};
pub use tape::{Gradients, Monomial, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op} expects {expected}, got shape {got:?}")]
    InvalidArgument { op: &'static str, expected: &'static str, got: Vec<usize> },
    #[error("linear solve failed: {0}")]
    Solve(#[from] crate::linalg::LinalgError),
    #[error("non-finite gradient for parameter {name} at optimizer step {step}")]
    DivergentGradient { name: String, step: u64 },
}
