//! Error type shared across the toolkit.

/// Errors produced by tensor ops, quantizers, training, and optimization passes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("non-finite {what} in {context}")]
    NonFinite { what: &'static str, context: String },

    #[error("calibration required: {0}")]
    NotCalibrated(String),

    #[error("training diverged at iteration {iter}: {detail}")]
    Diverged { iter: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }
}
