//! Dense tensors, layer operations and reverse-mode differentiation.
//!
//! Operations are recorded on a [`Tape`] as they execute. Every node keeps
//! its forward value; [`Tape::backward`] walks the record in reverse order of
//! creation, which is a reverse topological order because a node can only
//! reference nodes created before it.
//!
//! Convolution is cross-correlation (no kernel flip), lowered to a dense
//! matrix product per image. All reductions run in a fixed order, so two
//! identical forward passes are bit-identical.

mod conv;
mod gradcheck;
mod norm;
mod ops;
mod tape;
mod tensor;

use thiserror::Error;

pub use conv::conv2d_output_size;
pub use gradcheck::{check_gradients, GradCheck};
pub use norm::{BatchNormState, BnStats, BN_EPSILON, BN_MOMENTUM};
pub use ops::softmax;
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("computation record has a cycle at node {0}")]
    Cycle(usize),
    #[error("batch norm over an empty channel slice")]
    EmptyChannel,
}

/// Whether layers use batch statistics (and update running ones) or the
/// stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
