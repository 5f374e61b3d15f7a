use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("axis {axis} out of range for input dimension {dim}")]
    Axis { axis: usize, dim: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite value{}: {message}", index.map(|i| format!(" at batch index {i}")).unwrap_or_default())]
    Numerical {
        message: String,
        index: Option<usize>,
    },

    #[error("capability error: {0}")]
    Capability(String),

    #[error("missing required array `{0}`")]
    Specification(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("stability error: {0}")]
    Stability(String),

    #[error("integration diverged at step {step}")]
    Divergence { step: usize },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training aborted at epoch {epoch}: {source}")]
    Aborted {
        epoch: usize,
        #[source]
        source: Box<Error>,
        last_good: Box<crate::autodiff::Network>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>, index: Option<usize>) -> Self {
        Error::Numerical {
            message: message.into(),
            index,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
