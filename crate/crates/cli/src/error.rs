use std::path::PathBuf;

/// Failures of the command-line layer, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{message}{}", last_good.as_ref().map(|p| format!("; last good checkpoint: {}", p.display())).unwrap_or_default())]
    Numeric { message: String, last_good: Option<PathBuf> },
    #[error(transparent)]
    Core(#[from] guided_inpaint_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric { .. } => 4,
            CliError::Core(guided_inpaint_core::Error::NonFinite(_)) => 4,
            CliError::Core(guided_inpaint_core::Error::Validation(_)) => 2,
            CliError::Core(_) => 3,
        }
    }
}

pub fn data(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Attaches a path to an IO error.
pub fn io_at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = Result<T, CliError>;
