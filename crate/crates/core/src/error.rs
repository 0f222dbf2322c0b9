use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("regressor index {index} out of range 1..={n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("time must be non-negative, got {0}")]
    NegativeTime(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("Nussbaum argument {xi} exceeds the safe evaluation bound {xi_max}")]
    NussbaumOverflow { xi: f64, xi_max: f64 },

    #[error("Nussbaum argument must be non-negative, got {0}")]
    NussbaumDomain(f64),

    #[error("factorization inapplicable: g(0) has norm {0:e}")]
    FactorizationInapplicable(f64),

    #[error("factorization residual {residual:e} exceeds tolerance {tolerance:e} ({what})")]
    FactorizationResidual {
        what: String,
        residual: f64,
        tolerance: f64,
    },

    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),

    #[error("mismatched runs: {0}")]
    MismatchedRuns(String),

    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("malformed trajectory file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
