use thiserror::Error;

#[derive(Debug, Error)]
pub enum SarError {
    #[error("invalid grid shape {height}x{width}: {reason}")]
    InvalidShape {
        height: usize,
        width: usize,
        reason: &'static str,
    },
    #[error("infeasible schedule: {0}")]
    Infeasible(String),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("index {index} out of range (limit {limit})")]
    OutOfRange { index: usize, limit: usize },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("plan parse error: {0}")]
    PlanParse(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SarError>;
