use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while reading IDX files.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated file ({detail})")]
    Truncated { path: PathBuf, detail: String },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error at layer {index}: {message}")]
    Shape { index: usize, message: String },

    #[error("argument error: {0}")]
    Argument(String),

    #[error("protocol order error: {0}")]
    ProtocolOrder(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("scheduling error: {0}")]
    Scheduling(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Load(#[from] LoadError),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Configuration-type errors map to exit code 2 in the CLI.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse { .. }
                | Error::Argument(_)
                | Error::Partition(_)
                | Error::Scheduling(_)
        )
    }
}
