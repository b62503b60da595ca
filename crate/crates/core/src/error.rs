use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or feature shapes that cannot be combined.
    #[error("shape error: {0}")]
    Shape(String),

    /// A scalar argument outside its domain (temperature, lambda, ...).
    #[error("invalid parameter: {0}")]
    Param(String),

    /// An API precondition the caller violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values encountered during training or evaluation.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Violations of the probe/gallery construction rules.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Malformed manifest, split, image or checkpoint content.
    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },

    /// Malformed binary or structured content without a line position.
    #[error("invalid data: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
