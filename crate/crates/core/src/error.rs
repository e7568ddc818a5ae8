use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("model mismatch: parameters built for spec {expected:016x}, got {got:016x}")]
    ModelMismatch { expected: u64, got: u64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("numerical divergence in round {round}: global parameters are not finite")]
    Divergence { round: usize },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
