use std::path::PathBuf;

use thiserror::Error;

use crate::solver::SolveTrace;

pub type Result<T> = std::result::Result<T, DecscError>;

#[derive(Debug, Error)]
pub enum DecscError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("non-finite value produced in {stage}")]
    NonFinite { stage: &'static str },

    #[error("fixed-point iteration diverged after {} iterations", trace.iterations())]
    Diverged { trace: SolveTrace },

    #[error("state too large for dense Jacobian materialization ({dim} > {max})")]
    StateTooLarge { dim: usize, max: usize },

    #[error("bad magic bytes in {path:?}")]
    BadMagic { path: PathBuf },

    #[error("unsupported format version {version} in {path:?}")]
    UnknownVersion { path: PathBuf, version: u32 },

    #[error("truncated payload in {path:?}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("checksum mismatch in {path:?}")]
    Checksum { path: PathBuf },

    #[error("malformed file {path:?}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DecscError {
    /// Stable machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            DecscError::Shape(_) => "shape",
            DecscError::InvalidParam(_) => "invalid-param",
            DecscError::NonFinite { .. } => "non-finite",
            DecscError::Diverged { .. } => "diverged",
            DecscError::StateTooLarge { .. } => "state-too-large",
            DecscError::BadMagic { .. } => "bad-magic",
            DecscError::UnknownVersion { .. } => "unknown-version",
            DecscError::Truncated { .. } => "truncated",
            DecscError::Checksum { .. } => "checksum",
            DecscError::Malformed { .. } => "malformed",
            DecscError::Config(_) => "config",
            DecscError::TrainingAborted(_) => "training-aborted",
            DecscError::Io(_) => "io",
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        DecscError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DecscError::InvalidParam(msg.into())
    }
}

/// Fails with `NonFinite` naming `stage` if any entry of `data` is NaN or infinite.
pub(crate) fn ensure_finite(data: &[f64], stage: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DecscError::NonFinite { stage })
    }
}
