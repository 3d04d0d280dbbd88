use mjoda_core::Error as CoreError;

/// Failures of a pipeline stage, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Core(CoreError),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) | CliError::Format { .. } => 4,
            CliError::Core(e) => match e {
                CoreError::InvalidParams(_) | CoreError::ShapeMismatch { .. } => 2,
                _ => 3,
            },
        }
    }

    pub fn format(path: &std::path::Path, message: impl Into<String>) -> Self {
        CliError::Format {
            path: path.display().to_string(),
            message: message.into(),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::IntegrationFailure { .. }
            | CoreError::NonPositiveActivity { .. }
            | CoreError::FilterDivergence { .. } => CliError::Divergence(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
