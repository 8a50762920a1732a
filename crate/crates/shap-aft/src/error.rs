//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A computation produced NaN or infinity where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged at step {step} (seed {seed}): loss became non-finite")]
    Diverged { step: usize, seed: u64 },

    /// Invalid argument outside of tensor shapes.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Configuration file problems (parse failures, unknown keys, bad values).
    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage was asked to run before its inputs exist.
    #[error("missing upstream artifact: {0}")]
    MissingArtifact(String),

    /// Corrupt or mismatched on-disk artifact.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 missing artifact, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::NonFinite(_) | Error::Diverged { .. } => 4,
            _ => 1,
        }
    }
}
