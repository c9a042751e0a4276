use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("singular system in {0}")]
    Singular(String),

    #[error("resonant spectra: 1 - {lhs:.3e}*{rhs:.3e} is numerically zero")]
    Resonance { lhs: f64, rhs: f64 },

    #[error("{context}: matrix is not Schur (spectral radius {radius:.6})")]
    NotSchur { context: String, radius: f64 },

    #[error("{0}")]
    Assumption(String),

    #[error("eigensolver failed to converge")]
    Eigensolver,

    #[error("{solver} did not converge after {iterations} iterations (last residual {residual:.3e})")]
    NoConvergence {
        solver: String,
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
