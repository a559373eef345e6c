//! Dense `f64` tensors with a reverse-mode differentiation graph.
//!
//! Every model in the crate is trained through [`Graph`]: forward ops append
//! nodes, [`Graph::backward`] sweeps them once in reverse. A graph is owned by
//! one thread; independent graphs share nothing.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::finite_difference_check;
pub use graph::{Graph, Var};
pub use tensor::Tensor;


use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: zero or negative normalizer")]
    ZeroNormalizer { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{0}")]
    InvalidArgument(String),
}

#[cfg(test)]
mod tests;
