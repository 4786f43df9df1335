//! Minimal reverse-mode automatic differentiation.
//!
//! The engine covers exactly the operations needed to train an encoder,
//! PQ codebooks and bilinear selection matrices jointly: dense matmul,
//! bias add, tanh, slicing/concatenation, row-wise softmax, log, sums and
//! row dots, plus two detaching ops (stop-gradient and the straight-through
//! select) and a fused codeword-selection score op.
//!
//! All arithmetic is `f64` and gradients accumulate in a fixed order, so
//! repeated runs are bit-identical.

mod check;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use check::{finite_differences, gradient_check, max_relative_error, GradCheck};
pub use graph::{Gradients, Graph, NodeId, Op};
pub use tensor::{ParameterSet, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape error at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("degenerate input at node {node}: {detail}")]
    Degenerate { node: usize, detail: String },
    #[error("loss must be a 1x1 scalar, got shape {shape:?}")]
    NotScalar { shape: [usize; 2] },
    #[error("binding for '{name}' has shape {actual:?}, expected {expected:?}")]
    BindingShape {
        name: String,
        expected: [usize; 2],
        actual: [usize; 2],
    },
    #[error("duplicate name '{0}'")]
    DuplicateName(String),
    #[error("unknown name '{0}'")]
    UnknownName(String),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("{0}")]
    Usage(String),
}
