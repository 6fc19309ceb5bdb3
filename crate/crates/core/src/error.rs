use thiserror::Error;

use crate::solver::LossTrace;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("no valid pixels: {0}")]
    EmptyMask(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFinite {
        iteration: usize,
        trace: Box<LossTrace>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-readable tag, used by the command line error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InsufficientData(_) => "insufficient_data",
            Error::EmptyMask(_) => "empty_mask",
            Error::InvalidCamera(_) => "invalid_camera",
            Error::Format(_) => "format",
            Error::NonFinite { .. } => "non_finite",
            Error::Io(_) => "io",
        }
    }
}
