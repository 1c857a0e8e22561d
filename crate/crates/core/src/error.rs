use std::path::PathBuf;

use crate::engine::Shape4;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("{op}: output dimension would be < 1 for input {input}")]
    EmptyOutput { op: &'static str, input: Shape4 },

    #[error("{op}: spatial size {input} is not divisible by {divisor}")]
    NotDivisible {
        op: &'static str,
        input: Shape4,
        divisor: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("non-finite loss at {context}")]
    NonFiniteLoss { context: String },

    #[error("checkpoint: bad magic (expected MFEN)")]
    BadMagic,

    #[error("checkpoint: unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: truncated while reading {what}")]
    Truncated { what: String },

    #[error("checkpoint: unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("checkpoint: parameter `{name}` has shape {found:?}, model expects {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint: missing parameter `{0}`")]
    MissingParameter(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shapes(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
