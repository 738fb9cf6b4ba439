use thiserror::Error;

/// Failure of a command, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or input data (exit code 2).
    #[error("{0}")]
    Input(String),
    /// Anything else (exit code 1).
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

pub fn input(msg: impl Into<String>) -> CliError {
    CliError::Input(msg.into())
}

pub type CliResult<T> = Result<T, CliError>;
