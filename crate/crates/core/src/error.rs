//! Error type shared by every stage of the pipeline.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A configuration document or hyper-parameter set is unusable.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data is missing, malformed or inconsistent.
    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss or parameters.
    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decoding failed for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code associated with this error class.
    ///
    /// `2` configuration/argument, `3` data or I/O, `4` training divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) | Error::Json(_) => 2,
            Error::Data(_) | Error::Io { .. } | Error::Image { .. } => 3,
            Error::Divergence(_) => 4,
        }
    }
}
