use thiserror::Error;

/// Errors surfaced by the library. CLI exit codes map onto these in the
/// binary: config/input problems exit 2, verification failures exit 3,
/// training aborts exit 4.
#[derive(Debug, Error)]
pub enum TwistError {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid ratio: {0}")]
    InvalidRatio(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("incomplete round: {0}")]
    IncompleteRound(String),

    #[error("corruption error: {0}")]
    Corrupt(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TwistError>;
