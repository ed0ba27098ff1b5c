use thiserror::Error;

/// Errors raised anywhere in the routing library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{what} index {index} out of range (size {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("invalid config `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("unstable state transition {value} at layer {layer}, channel {channel}, state {state}")]
    Stability {
        layer: usize,
        channel: usize,
        state: usize,
        value: f64,
    },
    #[error("frozen parameters cannot be updated: {0}")]
    Frozen(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "numeric",
            Error::Contract(_) => "contract",
            Error::Index { .. } => "index",
            Error::Config { .. } => "config",
            Error::Stability { .. } => "stability",
            Error::Frozen(_) => "frozen",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
