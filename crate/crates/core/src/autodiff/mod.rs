//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! The backward pass is recorded onto the same tape as the forward pass, so
//! gradients are ordinary nodes and can be differentiated again. This is what
//! the gradient penalty of the feature critic relies on.

mod graph;
mod kernels;
mod tensor;

#[cfg(test)]
mod tests;

pub use graph::{Gradients, Graph, Node, NodeId, Op};
pub use tensor::Tensor;

pub(crate) use kernels::{matmul, softmax_rows};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("zero extent in shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { node: usize, op: &'static str },
    #[error("root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("node {0} has not been evaluated")]
    NotEvaluated(usize),
    #[error("leaf {0} has no bound value")]
    Unbound(usize),
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("node {wrt} is not a differentiable ancestor of node {root}")]
    NotAncestor { wrt: usize, root: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}
