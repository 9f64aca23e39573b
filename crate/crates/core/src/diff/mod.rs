//! Tensor arithmetic and a small reverse-mode differentiation engine.
//!
//! Backward rules are written in terms of the same recorded operations as
//! the forward pass, so a gradient obtained with [`Tape::grad_graph`] is an
//! ordinary [`Var`] that can be differentiated again. That is what the
//! reconciliation loss needs: it penalises an input-gradient and must be
//! differentiated with respect to the parameters that produced it.

mod check;
mod tape;
mod tensor;

pub use check::{finite_diff_grad, jacobian, max_rel_err, rel_err};
pub use tape::{Tape, Var};
pub(crate) use tape::softmax_ce_value;
pub use tensor::{matmul_t, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("invalid shape {0:?}: every extent must be >= 1")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{op} needs at least two classes, got {classes}")]
    TooFewClasses { op: &'static str, classes: usize },
    #[error("label count {labels} does not match batch size {batch}")]
    LabelCount { labels: usize, batch: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable {0} is not recorded on this tape")]
    ForeignVar(usize),
    #[error("eps must be positive, got {0}")]
    BadEps(f64),
}
