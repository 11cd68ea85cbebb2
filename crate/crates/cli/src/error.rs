use thiserror::Error;

/// Each variant maps to one process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: a document that does not parse or validate, a bad flag
    /// value, an unreadable input file. Exit 1.
    #[error("{0}")]
    Validation(String),
    /// Could not talk to the service, or it refused the credentials. Exit 2.
    #[error("{0}")]
    Transport(String),
    /// The service does not know the id. Exit 3.
    #[error("{0}")]
    NotFound(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Transport(_) => 2,
            CliError::NotFound(_) => 3,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
