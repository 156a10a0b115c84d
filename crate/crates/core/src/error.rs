use std::io;

use crate::VectorId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("zero-norm vector is undefined under the cosine metric")]
    ZeroNorm,

    #[error("embedding contains a non-finite value at position {0}")]
    NonFinite(usize),

    #[error("duplicate vector id {0}")]
    DuplicateId(VectorId),

    #[error("unknown vector id {0}")]
    UnknownId(VectorId),

    #[error("missing payload for vector id {0}")]
    MissingPayload(VectorId),

    #[error("missing text for vector id {0}")]
    MissingText(VectorId),

    #[error("entry point {0} is not resident; call ensure_resident first")]
    NotResident(VectorId),

    #[error("storage error: {0}")]
    Storage(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("line {line}: {reason}")]
    Ingest { line: usize, reason: String },

    #[error("no transactions recorded; rate is undefined")]
    UndefinedRate,

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }
}
