use std::path::Path;

use thiserror::Error;

/// Failures of a CLI command, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("data: {0}")]
    Data(String),

    #[error("numerical: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }
}

impl From<addgp::Error> for CliError {
    fn from(e: addgp::Error) -> Self {
        use addgp::Error as E;
        match e {
            E::NotPositiveDefinite { .. } | E::NonFinite(_) => CliError::Numerical(e.to_string()),
            E::InvalidRank(_) | E::InvalidParameter(_) => CliError::Usage(e.to_string()),
            E::DimensionMismatch(_)
            | E::DomainError { .. }
            | E::CapExceeded { .. }
            | E::Validation(_)
            | E::Format(_) => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
