//! Experiment driver: declarative configs, dataset generation, training and
//! transfer runs, evaluation and run comparison.

// `!(a > b)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod report;
pub mod runner;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// The configuration is malformed or inconsistent.
    #[error("invalid configuration at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Runtime {
        stage: &'static str,
        #[source]
        source: derl::Error,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Rejected(String),

    #[error("no readable metrics.json in {}", .0.join(", "))]
    MissingMetrics(Vec<String>),

    #[error("{failed} of {total} runs failed")]
    Jobs { failed: usize, total: usize },
}

impl CliError {
    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Schema { .. } | CliError::Rejected(_) => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Tags a library error with the pipeline stage it came from. Configuration
/// errors stay configuration errors.
pub fn at(stage: &'static str) -> impl FnOnce(derl::Error) -> CliError {
    move |e| match e {
        derl::Error::Config { path, message } => CliError::Schema { path, message },
        source => CliError::Runtime { stage, source },
    }
}
