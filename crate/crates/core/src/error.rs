use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("matrix entry at ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },

    #[error("bit-width {0} outside the supported range 2..=32")]
    InvalidBits(u32),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("attention bundle carries no projections")]
    MissingProjections,

    #[error("invalid bundle: {0}")]
    InvalidBundle(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("record {id:?}: invalid field `{field}`: {message}")]
    Validation {
        id: String,
        field: &'static str,
        message: String,
    },

    #[error("duplicate checkpoint id {id:?} on lines {first_line} and {second_line}")]
    DuplicateIdLines {
        id: String,
        first_line: usize,
        second_line: usize,
    },

    #[error("duplicate checkpoint id {0:?}")]
    DuplicateId(String),

    #[error("unknown checkpoint id {0:?}")]
    UnknownId(String),

    #[error("embedding dimension {found} does not match repository dimension {expected}")]
    Dimension { expected: usize, found: usize },

    #[error("rankings cover different id sets")]
    IdSetMismatch,

    #[error("unknown option {option:?}; valid options: {valid:?}")]
    UnknownOption { option: String, valid: Vec<String> },

    #[error("no clarification question is pending")]
    NoPendingQuestion,

    #[error("flops must be positive, got {0}")]
    NonPositiveFlops(f64),

    #[error("invalid quantization preset {0:?}")]
    InvalidPreset(String),

    #[error("{0}")]
    Generation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
