use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoseCamError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    #[error("alignment degenerate: {0}")]
    AlignmentDegenerate(String),

    #[error("sampling failed: {0}")]
    SamplingFailed(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("filter client failure: {0}")]
    FilterClient(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PoseCamError>;
