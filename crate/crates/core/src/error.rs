use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("covariance matrix is not positive definite (leading minor {minor}, pivot {pivot:e})")]
    NotPositiveDefinite { minor: usize, pivot: f64 },

    #[error("circulant embedding eigenvalue {value:e} at index {index} is below -{tolerance:e}")]
    NegativeEigenvalue {
        index: usize,
        value: f64,
        tolerance: f64,
    },

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("broken coupling at step {step}: {reason}")]
    BrokenCoupling { step: usize, reason: String },

    #[error("drift model `{model}` fails validation: {reason}")]
    InvalidDrift { model: String, reason: String },

    #[error("kernel `{kernel}` fails validation: {reason}")]
    InvalidKernel { kernel: String, reason: String },

    #[error("quadrature did not converge on [{lo}, {hi}] (error estimate {estimate:e})")]
    Quadrature { lo: f64, hi: f64, estimate: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
