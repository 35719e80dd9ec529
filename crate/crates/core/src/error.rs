use thiserror::Error;

/// Errors produced by the control, identification and evaluation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what} is not strictly stable (spectral radius {rho:.6} >= 1)")]
    Unstable { what: &'static str, rho: f64 },

    #[error("state diverged at step {step} (norm {norm:e})")]
    Diverged { step: usize, norm: f64 },

    #[error("Riccati solver failed: {0}")]
    DareFailure(String),

    #[error("Markov estimate for lag {tau} unavailable at step {k}")]
    UnavailableEstimate { tau: usize, k: usize },

    #[error("probe inputs rank deficient after {attempts} attempts")]
    DegenerateProbes { attempts: usize },

    #[error("bound outside its validity range: {0}")]
    Validity(String),

    #[error("certificate unavailable: {0}")]
    CertificateUnavailable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
