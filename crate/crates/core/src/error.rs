use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("did not converge: {0}")]
    Convergence(String),

    #[error("invalid record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },

    #[error("non-finite log-likelihood for record {id}")]
    NonFinite { id: String },

    #[error("non-finite objective value at probe of coordinate {coord}")]
    NonFiniteProbe { coord: usize },

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("singular observed information (condition number {condition:.3e})")]
    SingularInformation { condition: f64 },

    #[error("dataset fingerprint does not match the null fit")]
    FingerprintMismatch,

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("time {t} outside the sieve range [{lo}, {hi}]")]
    Range { t: f64, lo: f64, hi: f64 },

    #[error("conditioning event has probability {0:.3e}")]
    DegenerateConditioning(f64),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
