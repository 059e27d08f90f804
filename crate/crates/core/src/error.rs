use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("size mismatch: expected {expected} values, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("exponent pair inadmissible for d={dim}: {reason}")]
    Inadmissible { dim: usize, reason: String },

    #[error("{kind} index {index} out of range (have {len})")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        len: usize,
    },

    #[error("time {t} outside stored range [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("horizon mismatch: {0}")]
    HorizonMismatch(String),

    #[error("numerical blow-up at step {step} (norm {norm})")]
    BlowUp { step: usize, norm: f64 },

    #[error("Picard map is not contracting (measured ratio {ratio:.4})")]
    NonContraction { ratio: f64 },

    #[error("{0}")]
    Precondition(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
