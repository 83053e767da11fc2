//! Minimal reverse-mode differentiable array engine.
//!
//! Values live in [`Tensor`]s (row-major `f64`). A [`Tape`] records one forward
//! pass; [`Tape::backward`] walks it in reverse and accumulates gradients on
//! every node that requires them. Trainable weights are [`DiffTensor`]s held in
//! a [`ParamStore`] and bound onto a tape per forward pass.

mod adam;
mod array;
pub mod checkpoint;
mod conv;
mod gradcheck;
mod param;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use array::Tensor;
pub use gradcheck::{check_tape_fn, finite_difference_check, GradCheckReport, FD_STEP};
pub use param::{DiffTensor, ParamId, ParamStore};
pub use tape::{BatchNormStats, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: output size is not an integer ({detail})")]
    NonIntegerOutput { op: &'static str, detail: String },
    #[error("{op} expects a {expected}-d tensor, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}
