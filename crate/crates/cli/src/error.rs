use std::process::ExitCode;

use mode_dyn::Error as CoreError;

/// Failures split by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, bad config, missing or mismatched inputs (exit 2).
    #[error("{0}")]
    Usage(String),
    /// Numerical or generation failure (exit 3).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(3),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidConfig(_) | CoreError::Parse(_) | CoreError::DimensionMismatch { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(format!("json error: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Reading a user-named input: a missing or malformed file is a usage error.
pub fn input<T>(what: &str, path: &std::path::Path, r: mode_dyn::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::usage(format!("cannot read {what} {}: {e}", path.display())))
}
