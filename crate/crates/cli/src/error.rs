use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] flipsbir::Error),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
        }
    }

    /// One JSON object on one line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace('\n', " ");
        serde_json::json!({ "error": self.kind(), "message": msg }).to_string()
    }
}

impl From<flipsbir::error::ConfigError> for CliError {
    fn from(e: flipsbir::error::ConfigError) -> Self {
        CliError::Core(e.into())
    }
}
