use thiserror::Error;

/// Errors raised by the synthesis toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("state response has a singular diagonal block at time {block}")]
    SingularResponse { block: usize },
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("schema mismatch: expected `{expected}`, found `{found}`")]
    Schema { expected: String, found: String },
    #[error("no feasible gamma on the grid ({tried} values tried)")]
    NoFeasibleGamma { tried: usize },
    #[error("optimization problem is {0}")]
    NotOptimal(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
