use riemod::Error as CoreError;

/// Failure classes, each with its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("i/o failure: {0}")]
    Io(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("verification failed: {0}")]
    VerificationFailed(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::ConfigInvalid(_) => 2,
            CliError::Io(_) => 3,
            CliError::NonFinite(_) => 4,
            CliError::VerificationFailed(_) => 5,
            CliError::Numerical(_) => 6,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::ConfigInvalid(msg.into())
    }

    pub fn io(context: impl std::fmt::Display, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{context}: {err}"))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite(_) => CliError::NonFinite(e.to_string()),
            CoreError::NotPositiveDefinite { .. }
            | CoreError::NotSymmetric { .. }
            | CoreError::RankDeficient { .. } => CliError::Numerical(e.to_string()),
            CoreError::DimensionMismatch { .. }
            | CoreError::InvalidArgument(_)
            | CoreError::StaleTape => CliError::ConfigInvalid(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
