use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, bad configuration or missing inputs.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] meshquery::Error),
}

impl CliError {
    /// Failure to open a file the command was asked to read.
    pub fn input(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Usage(format!("{}: input file not found", path.display()))
        } else {
            CliError::Core(meshquery::Error::io(path, e))
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.category(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(meshquery::Error::Config(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
