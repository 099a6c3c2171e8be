use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown prompt `{0}`")]
    UnknownPrompt(String),

    #[error("response index {index} out of range for prompt {prompt} ({count} responses)")]
    UnknownResponse {
        prompt: usize,
        index: usize,
        count: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid: {0}")]
    Validation(String),

    #[error("preference table is not Bradley-Terry representable (residual {residual:e})")]
    Inconsistent { residual: f64 },

    #[error("no convergence after {steps} steps: gradient norm {grad_norm:e} > {tol:e}; {detail}")]
    Convergence {
        steps: usize,
        grad_norm: f64,
        tol: f64,
        detail: String,
    },

    #[error("training aborted at step {step}: non-finite {quantity}")]
    NonFinite { step: usize, quantity: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
