use std::process::ExitCode;

use goat_core::GoatError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments or configuration; nothing was computed.
    #[error("{0}")]
    Usage(String),
    /// A run or check that started and failed.
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] GoatError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Self::Usage(_) => ExitCode::from(2),
            _ => ExitCode::FAILURE,
        }
    }
}
