//! Reverse-mode automatic differentiation on a flat tape, plus Adam.
//!
//! Every backward rule is written in terms of recorded graph operations, which
//! makes gradients differentiable again: the R1 penalty on the potential needs
//! `d/dω ‖∇ᵤ φ_ω(y, u)‖²`.

mod adam;
mod check;
mod graph;
mod tensor;

pub use adam::AdamState;
pub use check::grad_check;
pub use graph::{sigmoid, softplus, Gradients, Graph, OpKind, Unary, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{op} cannot be differentiated again")]
    HigherOrder { op: &'static str },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("operation takes {expected} inputs, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("optimizer tracks {expected} parameters, got {got}")]
    ParamMismatch { expected: usize, got: usize },
}
