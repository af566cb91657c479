//! Small convolutional networks exposing logits, a penultimate embedding and
//! a hint activation.

pub mod checkpoint;
mod model;
mod spec;

pub use model::{
    build, evaluate, forward, BoundParams, Evaluated, ForwardOutput, NetworkParams, Role,
};
pub use spec::{Block, Head, NetworkSpec};

use crate::autograd::AutogradError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("invalid network spec{}: {reason}", block.map(|b| format!(" at block {b}")).unwrap_or_default())]
    InvalidSpec { block: Option<usize>, reason: String },
    #[error("input batch shape {got:?} does not match (n, {expected:?})")]
    InputShape { expected: [usize; 3], got: Vec<usize> },
    #[error("parameters do not match spec: {0}")]
    ParamMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}: {1}")]
    Io(String, String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}
