use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in `{op}`: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("backward: {0}")]
    Backward(String),

    #[error("function is not deterministic: two evaluations at the same point differ ({first} vs {second})")]
    Nondeterministic { first: f64, second: f64 },

    #[error("curvature mismatch: {0} vs {1}")]
    CurvatureMismatch(f64, f64),

    #[error("invalid curvature {0}: must be finite and strictly negative")]
    InvalidCurvature(f64),

    #[error("point outside the Poincaré ball ({mode} mode): norm {norm} >= radius {radius}")]
    OutsideBall {
        mode: &'static str,
        norm: f64,
        radius: f64,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),

    #[error("malformed header in {path}: {detail}")]
    Header { path: PathBuf, detail: String },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("config digest mismatch: checkpoint {checkpoint}, run config {config}")]
    DigestMismatch { checkpoint: String, config: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, used for CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Domain { .. } | Error::OutsideBall { .. } | Error::CurvatureMismatch(..) | Error::InvalidCurvature(_) => {
                "domain"
            }
            Error::NonFinite { .. } | Error::NonFiniteGrad(_) => "non-finite",
            Error::Backward(_) | Error::Nondeterministic { .. } => "autodiff",
            Error::Invalid(_) => "invalid-argument",
            Error::Header { .. } | Error::Truncated { .. } | Error::Version { .. } | Error::Json(_) => "format",
            Error::Config(_) => "config",
            Error::DigestMismatch { .. } => "digest-mismatch",
            Error::Io(_) => "io",
        }
    }

    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 2,
            Error::DigestMismatch { .. } => 3,
            Error::Io(_) | Error::Header { .. } | Error::Truncated { .. } | Error::Version { .. } | Error::Json(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
