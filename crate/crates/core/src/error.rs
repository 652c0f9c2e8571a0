use std::path::PathBuf;

/// Errors produced by the re-identification engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("zero-norm vector")]
    ZeroVector,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty foreground mask; area ratios are undefined")]
    EmptyForeground,

    #[error("malformed {format} data at byte offset {offset}: {reason}")]
    Malformed { format: &'static str, offset: u64, reason: String },

    #[error("unsupported {format} version or magic: {reason}")]
    BadMagic { format: &'static str, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown identity {0}")]
    UnknownIdentity(u64),

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("degenerate render: {0}")]
    DegenerateRender(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
