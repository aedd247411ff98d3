//! Minimal reverse-mode differentiation over dense `f64` arrays, plus the
//! AdamW optimizer used to train the toy decoder.

mod ops;
mod optim;
mod param;
mod tape;

pub use ops::{concat, sigmoid, MASK_PENALTY};
pub use optim::{default_drop_epoch, optimizer_step, AdamW, LrSchedule, OptimizerState, StepReport};
pub use param::{BoundParams, Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Tensor};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: shape {shape:?} needs at least {min} axes")]
    Rank {
        op: &'static str,
        shape: Vec<usize>,
        min: usize,
    },
    #[error("slice {start}..{end} out of range on axis {axis} of {shape:?}")]
    Slice {
        shape: Vec<usize>,
        axis: usize,
        start: usize,
        end: usize,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("softmax row {row} has no unmasked entries")]
    FullyMasked { row: usize },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}: no inputs")]
    Empty(&'static str),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
}
