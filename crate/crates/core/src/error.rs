use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    Validation(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("power flow did not converge after {iterations} iterations (mismatch {mismatch:.3e})")]
    PowerFlow { iterations: usize, mismatch: f64 },

    #[error("singular network matrix (reciprocal condition estimate {rcond:.3e})")]
    Singular { rcond: f64 },

    #[error("voltage steps do not excite all ports: rank {rank} < {ports}, singular values {singular_values:?}")]
    RankDeficient {
        rank: usize,
        ports: usize,
        singular_values: Vec<f64>,
    },

    #[error("iteration did not converge at step {step} (change {change:.3e})")]
    NonConvergence { step: usize, change: f64 },

    #[error("missing channel `{0}`")]
    MissingChannel(String),

    #[error("fault outside modeled region (bus {0})")]
    FaultOutsideModeledRegion(usize),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by the numerics rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::PowerFlow { .. }
                | Error::Singular { .. }
                | Error::RankDeficient { .. }
                | Error::NonConvergence { .. }
                | Error::Numerical(_)
        )
    }
}
