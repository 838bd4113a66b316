use thiserror::Error;

#[derive(Debug, Error)]
pub enum LsaError {
    #[error("eigenvalue {index} is not strictly positive: {value}")]
    NonPositiveEigenvalue { index: usize, value: f64 },

    #[error("eigenvector matrix is not orthonormal (Gram deviation {deviation:.3e})")]
    NotOrthonormal { deviation: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range 1..={dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("divergence at t = {t}: loss = {loss}")]
    Divergence { t: f64, loss: f64 },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LsaError>;
