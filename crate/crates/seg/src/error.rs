use std::path::PathBuf;

use revhrnet_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SegError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("invalid architecture: {0}")]
    Spec(String),
    #[error("input {height}x{width} is not divisible by {divisor}")]
    Indivisible {
        height: usize,
        width: usize,
        divisor: usize,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint was written for a different architecture (fingerprint {found}, model {expected})")]
    FingerprintMismatch { expected: String, found: String },
    #[error("parameter table mismatch: {}", .0.join("; "))]
    ParamMismatch(Vec<String>),
    #[error("non-finite {what} at step {step}{}", .param.as_ref().map(|p| format!(" in {p}")).unwrap_or_default())]
    NonFinite {
        what: &'static str,
        step: usize,
        param: Option<String>,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SegError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SegError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = SegError> = std::result::Result<T, E>;
