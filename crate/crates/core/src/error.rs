use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("missing key {key} at line {line}")]
    MissingKey { key: String, line: usize },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("token id {id} at position {position} is outside a vocabulary of {size}")]
    TokenOutOfRange {
        id: usize,
        position: usize,
        size: usize,
    },

    #[error("sequence of length {len} exceeds context length {context_len}")]
    TooLong { len: usize, context_len: usize },

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint size error: expected {expected} bytes, found {found}")]
    Size { expected: usize, found: usize },

    #[error("computation graph error: {0}")]
    Graph(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite numbers during computation.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::NonFiniteLoss { .. })
    }

    /// True for failures caused by caller-supplied parameters or configuration.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Param(_))
    }
}
