use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Shapes, channel counts or settings that cannot be combined.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image format error at {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    /// Checkpoint written by an incompatible layout or format version.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    /// Non-finite loss or prediction.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A rescaling was requested for a prediction whose mean is zero.
    #[error("degenerate prediction: {0}")]
    DegeneratePrediction(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path.into());
        }
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category label, used by the CLI for exit codes and messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::MissingFile(_) | Error::Io { .. } | Error::Format { .. } => "io",
            Error::Incompatible(_) => "incompatible",
            Error::Numerical(_) => "numerical",
            Error::DegeneratePrediction(_) => "degenerate",
        }
    }
}
