//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is an append-only list of nodes; a [`Tensor`] is a handle into
//! it. Operators record a node whenever one of their inputs requires a
//! gradient. [`Graph::backward`] returns leaf gradients, and
//! [`Graph::grad_as_graph`] returns a gradient that is itself part of the
//! graph, which is what a gradient penalty needs.
//!
//! One graph is built per training step and owned by a single thread.

mod array;
pub mod gradcheck;
mod graph;
mod index_map;
mod ops;

pub use array::{numel, Array};
pub use graph::{Gradients, Graph, Tensor};
pub use index_map::IndexMap;
pub use ops::broadcast_shapes;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("`{0}` cannot be differentiated twice; remove it from the penalized path")]
    NotDoubleDifferentiable(&'static str),
}
