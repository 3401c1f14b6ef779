use stdegrade_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Numerical(String),
    #[error("estimation did not converge: {0}")]
    NotConverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => 2,
            CliError::Core(e) => match e {
                CoreError::Argument(_)
                | CoreError::Config(_)
                | CoreError::Domain(_)
                | CoreError::Parse { .. }
                | CoreError::Io(_) => 2,
                CoreError::Numerical(_) | CoreError::Fit(_) | CoreError::Size { .. } | CoreError::Rank(_) => 3,
            },
            CliError::Numerical(_) => 3,
            CliError::NotConverged(_) => 4,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
