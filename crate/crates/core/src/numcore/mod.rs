//! Dense `f64` tensors and a small reverse-mode differentiation graph.
//!
//! Graphs are built once, then evaluated against named input bindings. They
//! hold no interior state, so a shared `&Graph` can be evaluated from many
//! threads at once.

mod graph;
mod tensor;

pub use graph::{Bindings, Graph, NodeId, Op, ProbedGradients};
pub use tensor::Tensor;

use thiserror::Error;

/// Floor used by `clamp_min` before taking logs.
pub const LOG_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("graph has no input named `{0}`")]
    UnknownInput(String),
    #[error("gradients need a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("graph output has not been set")]
    NoOutput,
}
