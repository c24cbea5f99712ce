use std::path::PathBuf;

use qagen_core::Error as CoreError;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("missing input file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: CoreError,
    },

    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Core {
                source: CoreError::NonFinite(_),
                ..
            } => EXIT_NUMERIC,
            CliError::MissingFile(_) | CliError::Core { .. } | CliError::Data(_) => EXIT_DATA,
        }
    }
}

/// Attaches a stage description to library errors.
pub trait Context<T> {
    fn context(self, what: impl Into<String>) -> Result<T, CliError>;
}

impl<T> Context<T> for Result<T, CoreError> {
    fn context(self, what: impl Into<String>) -> Result<T, CliError> {
        self.map_err(|source| CliError::Core {
            context: what.into(),
            source,
        })
    }
}
