use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("masking error: {0}")]
    Masking(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("spike tensor corrupted: {0}")]
    Corruption(String),

    #[error("profile error: {0}")]
    Profile(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("{path}:{line}: {kind}")]
    Parse { path: PathBuf, line: usize, kind: ParseErrorKind },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Why a manifest or feature file failed to parse.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("row has {found} columns, expected {expected}")]
    RaggedRow { expected: usize, found: usize },
    #[error("non-numeric cell {0:?}")]
    NonNumeric(String),
    #[error("label {label} out of range (num_classes = {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("malformed line: {0}")]
    Malformed(String),
    #[error("file has no rows")]
    Empty,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
