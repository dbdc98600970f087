use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the kernel library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or spatial sizes of operands do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value lies outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("index ({row}, {col}) out of bounds for {height}x{width} map")]
    Index {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    /// Metadata passed to a backward pass does not describe the forward call.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
