//! Crate-wide error type and the process exit-code contract.

use thiserror::Error;

/// Unified error for every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum SfimError {
    /// Tensor extents incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration, flag combination, or out-of-range parameter.
    #[error("config error: {0}")]
    Config(String),

    /// A forward op produced NaN/Inf, or an iterative process diverged.
    /// `context` names the offending op or block.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Numeric failure other than non-finiteness (e.g. an invariant suite
    /// reporting violations).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed file contents (bad magic, version, or structure).
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl SfimError {
    pub fn shape(msg: impl Into<String>) -> Self {
        SfimError::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        SfimError::Config(msg.into())
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        SfimError::NonFinite {
            context: context.into(),
        }
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        SfimError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the CLI: 2 usage/config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            SfimError::Shape(_) | SfimError::Config(_) => 2,
            SfimError::NonFinite { .. } | SfimError::Numeric(_) => 3,
            SfimError::Format { .. } | SfimError::Io(_) | SfimError::Image(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, SfimError>;
