//! Minimal dense reverse-mode differentiation.
//!
//! Everything is `f64`, row-major, and at most two-dimensional on the tape.
//! Parameters live in a [`ParamStore`]; a [`Tape`] copies the ones it uses,
//! records the forward pass and replays it backwards into [`Gradients`].

mod attention;
pub mod checkpoint;
mod gemm;
pub mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use attention::{multi_head_attention, AttentionOutput};
pub use gemm::gemm;
pub use optim::{adam_step, AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward call")]
    TapeConsumed,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("model dimension {dim} is not divisible by {heads} heads")]
    Heads { dim: usize, heads: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid tensor: {0}")]
    Invalid(String),
}
