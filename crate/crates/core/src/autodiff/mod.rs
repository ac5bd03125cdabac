//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations append nodes and
//! return [`Var`] handles; [`Tape::backward`] fills gradients for every node
//! that requires one and is reachable from the scalar loss.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport, GRADCHECK_DENOM_FLOOR};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("layer norm eps must be non-negative, got {0}")]
    InvalidEps(f64),
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("cross entropy has no target positions")]
    NoTargets,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("variable belongs to a different tape")]
    ForeignVar,
}

#[cfg(test)]
mod tests;
