use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid specifications differ")]
    GridMismatch,
    #[error("position cutoff too small: truncated norm deviates by {deviation:.3e}")]
    CutoffTooSmall { deviation: f64 },
    #[error("filter radius {0} outside (0, c/2]")]
    InvalidRadius(f64),
    #[error("envelope half-width {s} is not below c/2")]
    SupportTooWide { s: f64 },
    #[error("theta-sum truncation too short: dropped term {dropped:.3e}")]
    TruncationError { dropped: f64 },
    #[error("outcome {0} has zero probability")]
    ZeroProbabilityBranch(u8),
    #[error("unsupported size: {0}")]
    UnsupportedSize(String),
    #[error("unsupported gate: {0}")]
    UnsupportedGate(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("mode index {0} out of range")]
    ModeOutOfRange(usize),
    #[error("malformed input: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;
