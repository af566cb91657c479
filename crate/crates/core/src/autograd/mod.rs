//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value plus whatever its backward rule needs. Parameters enter as
//! [`Graph::param`] leaves, fixed inputs (including anything produced by a
//! frozen network) as [`Graph::constant`] leaves. Calling
//! [`Graph::backward`] on a scalar node fills the gradient of every node on a
//! path from a parameter to the root; constants never get one.
//!
//! ```
//! use distillkit::autograd::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = g.mul(x, x).unwrap();
//! let root = g.sum(sq, None).unwrap();
//! g.backward(root).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod graph;
mod tensor;

pub use graph::{Graph, PrimitiveKind, Var};
pub use tensor::{softmax_with_temperature, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutogradError {
    #[error("{kind}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        kind: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("shape {shape:?} holds {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {shape:?} has a zero-sized axis")]
    InvalidShape { shape: Vec<usize> },
    #[error("unknown primitive kind `{0}`")]
    UnknownKind(String),
    #[error("{kind} takes {expected} inputs, got {got}")]
    Arity {
        kind: String,
        expected: usize,
        got: usize,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward called on a node that was never computed in this graph")]
    BackwardBeforeForward,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("empty input")]
    EmptyInput,
}
