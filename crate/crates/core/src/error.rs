use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("risk tolerance must lie in (0, 1], got {0}")]
    InvalidTau(f64),
    #[error("empirical CVaR needs at least one sample")]
    EmptySamples,
    #[error("no transitions recorded for step {0}")]
    EmptyDataset(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not symmetric positive definite")]
    SingularMatrix,
    #[error("reward support is not on the budget grid: {0}")]
    GridMismatch(String),
    #[error("instance too large for exact enumeration ({cells} cells, limit {limit})")]
    InstanceTooLarge { cells: u64, limit: u64 },
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("numerical invariant violated: {0}")]
    InvariantViolation(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
