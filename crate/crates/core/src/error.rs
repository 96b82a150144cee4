use thiserror::Error;

/// Errors raised by problem construction, projections, calibration and the solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("invalid dual set: {0}")]
    InvalidDualSet(String),

    #[error("Slater margin must be positive, got {0}")]
    SlaterViolation(f64),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid privacy policy: {0}")]
    InvalidPolicy(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("non-finite value at iteration {iteration}: {what}")]
    NonFinite { iteration: u64, what: &'static str },

    #[error("divergence guard tripped at iteration {iteration}: |z| = {norm:.6e} exceeds {limit:.6e}")]
    Divergence { iteration: u64, norm: f64, limit: f64 },

    #[error("protocol error in round {round}: {detail}")]
    Protocol { round: u64, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, actual: usize, context: &'static str) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected,
            actual,
            context,
        })
    }
}
