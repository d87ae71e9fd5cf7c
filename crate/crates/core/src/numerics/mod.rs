//! Minimal dense-tensor engine with reverse-mode gradients.
//!
//! Only the primitives the adapter and distillation equations need are provided:
//! matrix products, element-wise arithmetic (with one row-vector broadcast pattern),
//! `tanh`/`sigmoid`/`relu`, temporal mean pooling, softmax, and the two fused losses
//! (KL divergence and cross-entropy). [`grad_check`] is the finite-difference oracle
//! used to certify every analytic gradient.

mod graph;
mod gradcheck;
mod params;
mod tensor;

pub use graph::{softmax_slice, Activation, Binary, Gradients, Graph, Var, PROB_EPS};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, GradMismatch, DEFAULT_STEP};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid tensor shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    Ragged,
    #[error("empty sequence")]
    EmptySequence,
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("objective is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Builds an `L×d` feature sequence, rejecting `L == 0`.
pub fn sequence(rows: &[Vec<f64>]) -> Result<Tensor, NumericsError> {
    if rows.is_empty() {
        return Err(NumericsError::EmptySequence);
    }
    Tensor::from_rows(rows)
}
