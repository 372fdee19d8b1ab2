use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
///
/// The variants line up with the CLI exit codes (see [`HdmError::exit_code`]).
#[derive(Debug, Error)]
pub enum HdmError {
    /// A caller broke an operation's precondition (shape mismatch, bad step index).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A configuration or hyperparameter is out of range.
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// A checkpoint, sidecar, or config file is malformed.
    #[error("format error: {0}")]
    Format(String),
    /// A loss or statistic went non-finite during training.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// A metric cannot be computed for the given input (e.g. single-class labels).
    #[error("metric error: {0}")]
    Metric(String),
    /// A dataset could not be loaded.
    #[error("load error at {path}: {msg}")]
    Load { path: PathBuf, msg: String },
    /// Bundle and configuration disagree.
    #[error("bundle mismatch: {0}")]
    BundleMismatch(String),
    /// Map and mask shapes disagree at evaluation time.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl HdmError {
    pub fn contract(msg: impl Into<String>) -> Self {
        HdmError::Contract(msg.into())
    }

    pub fn param(msg: impl Into<String>) -> Self {
        HdmError::Parameter(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        HdmError::Format(msg.into())
    }

    pub fn load(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        HdmError::Load {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code used by the `hdm` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            HdmError::Parameter(_) | HdmError::Contract(_) => 2,
            HdmError::Io(_) | HdmError::Image(_) | HdmError::Load { .. } | HdmError::Format(_) => 3,
            HdmError::Numeric(_) => 4,
            HdmError::BundleMismatch(_) => 5,
            HdmError::ShapeMismatch(_) | HdmError::Metric(_) => 6,
        }
    }
}

pub type Result<T, E = HdmError> = std::result::Result<T, E>;
