use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A modelling assumption failed at runtime (e.g. a singular inertia matrix).
    #[error("model violation: {0}")]
    ModelViolation(String),

    #[error("estimator diverged: {0}")]
    EstimatorDivergence(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("simulation diverged at t={t:.4}: {detail}")]
    Divergence { t: f64, detail: String },

    #[error("config parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Parse { .. } | Error::InvalidInput(_) | Error::Dimension(_) => 2,
            Error::Divergence { .. } | Error::EstimatorDivergence(_) | Error::ModelViolation(_) => 3,
            _ => 1,
        }
    }
}

pub(crate) fn check_finite(label: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{label} has non-finite components")))
    }
}

pub(crate) fn check_len(label: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Dimension(format!("{label}: expected length {want}, got {got}")))
    }
}
