use thiserror::Error;

/// Errors shared across the crate.
#[derive(Error, Debug)]
pub enum LaceError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("timestep {t} out of range [{lo}, {hi}]")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("unknown value {value:?} for domain {domain:?}")]
    UnknownValue { domain: String, value: String },
    #[error("domain {0:?} is unassigned")]
    UnassignedDomain(String),
    #[error("duplicate domain {0:?} in edit list")]
    DuplicateEditDomain(String),
    #[error("image is unmeasurable: {0}")]
    Unmeasurable(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("model not ready: {0}")]
    NotReady(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LaceError>;
