use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("cannot read {path}: {source}")]
    Input {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what} at {path}: {reason}")]
    Malformed {
        what: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error(transparent)]
    Simulation(fedctl_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input { .. } | CliError::Malformed { .. } => 2,
            CliError::Simulation(fedctl_core::Error::Config { .. }) => 2,
            CliError::Simulation(fedctl_core::Error::Divergence { .. }) => 3,
            CliError::Simulation(_) | CliError::Output { .. } => 1,
        }
    }
}

impl From<fedctl_core::Error> for CliError {
    fn from(e: fedctl_core::Error) -> Self {
        CliError::Simulation(e)
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
