//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a topologically ordered list of primitive operations over
//! [`Tensor`] values. Leaves are either inputs (e.g. an image, gradients
//! wanted for MGU) or parameters (gradients wanted for training). A forward
//! pass evaluates every node; a backward pass from a designated scalar loss
//! node returns exact gradients for all leaves in a [`GradientBundle`].
//!
//! Everything is `f64` and immutable after construction; forward/backward
//! over distinct bindings may run concurrently.

mod check;
mod graph;
mod tensor;

pub use check::grad_check;
pub use graph::{forward, backward, Graph, GradientBundle, Node, NodeId, Op};
pub use tensor::Tensor;

use thiserror::Error;

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadTensorShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value in tensor data")]
    NonFiniteTensor,
    #[error("node {node}: shape mismatch ({detail})")]
    ShapeMismatch { node: NodeId, detail: String },
    #[error("node {node}: non-finite intermediate value")]
    NonFinite { node: NodeId },
    #[error("node {node}: leaf node has no bound tensor")]
    Unbound { node: NodeId },
    #[error("node {node}: loss node is not scalar")]
    NonScalarLoss { node: NodeId },
    #[error("node {node}: masked reduction over an empty mask")]
    EmptyMask { node: NodeId },
    #[error("node {node}: invalid operation ({detail})")]
    InvalidOp { node: NodeId, detail: String },
}

pub type Result<T> = std::result::Result<T, GradError>;
