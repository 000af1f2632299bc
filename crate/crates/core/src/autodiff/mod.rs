//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records each operation as it is evaluated; [`Tape::backward`]
//! replays the record in reverse and accumulates gradients into every node
//! that requires one. Tapes are rebuilt for every forward pass and are never
//! shared between threads; independent tapes may run in parallel.
//!
//! Broadcasting is limited to a right operand whose shape is a trailing
//! suffix of the left operand's shape (e.g. a bias `[H]` added to `[T,H]`).

pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Default epsilon added to the variance in [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid tensor: {0}")]
    Invalid(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable {0} was not recorded on this tape")]
    ForeignVar(usize),
}

#[cfg(test)]
mod tests;
