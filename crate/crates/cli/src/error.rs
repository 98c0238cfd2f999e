use thiserror::Error;

/// Failures of a command, split by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, configuration or inputs (exit 1).
    #[error("{0}")]
    Validation(String),
    /// Failure while running a valid request (exit 2).
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<adverseg_core::Error> for CliError {
    fn from(e: adverseg_core::Error) -> Self {
        use adverseg_core::Error as E;
        match e {
            E::InvalidArgument(_) | E::ShapeMismatch { .. } | E::Format(_) | E::MaskLeakage(_) => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}
