use std::path::PathBuf;

use crate::diffcore;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] diffcore::Error),
    #[error("cannot assign {gts} ground truths to {queries} queries")]
    TooManyTargets { gts: usize, queries: usize },
    #[error("group {group}: cannot assign {gts} ground truths to {queries} queries")]
    InfeasibleGroup { group: usize, gts: usize, queries: usize },
    #[error("exhaustive assignment limited to {max} ground truths, got {gts}")]
    BruteForceTooLarge { gts: usize, max: usize },
    #[error("multiplicity must be at least 1")]
    ZeroMultiplicity,
    #[error("{index} out of range for {what} of length {len}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite activation after decoder layer {layer}")]
    NonFinite { layer: usize },
    #[error("{path}: line {line}: {reason}")]
    Format { path: PathBuf, line: usize, reason: String },
    #[error("{path}: invalid checkpoint: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
