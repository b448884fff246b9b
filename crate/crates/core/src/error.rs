use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected dtype {expected}, found {found}")]
    DType {
        op: &'static str,
        expected: &'static str,
        found: &'static str,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("non-finite value at index {index} in {what}")]
    NonFinite { what: &'static str, index: usize },

    #[error("i32 accumulator would overflow: inner dimension {k} exceeds {max}")]
    AccumulatorOverflow { k: usize, max: usize },

    #[error("{path}: bad magic {found:?}, expected \"SPTQ\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported archive version {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated archive ({what})")]
    Truncated { path: PathBuf, what: String },

    #[error("{path}: tensors {first:?} and {second:?} have overlapping byte ranges")]
    OverlappingRanges {
        path: PathBuf,
        first: String,
        second: String,
    },

    #[error("{path}: malformed header: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("tensor {name:?}: expected shape {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("token id {id} at position {pos} is out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, pos: usize, vocab: usize },

    #[error("unknown tap {0:?}")]
    UnknownTap(String),

    #[error("{path}: {cause}")]
    Io {
        path: PathBuf,
        cause: std::io::Error,
    },

    #[error("{path}: {cause}")]
    Json {
        path: PathBuf,
        cause: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }
}
