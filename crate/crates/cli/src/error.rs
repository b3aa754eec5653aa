use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] spherestereo::Error),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit status: 2 for mismatched inputs, 3 when no direction of
    /// travel can be found, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(spherestereo::Error::DimensionMismatch { .. }) => 2,
            CliError::Core(spherestereo::Error::IndeterminateDirection(_)) => 3,
            _ => 1,
        }
    }
}

/// Attaches the offending path to a core error.
pub fn with_path<T>(path: &Path, r: spherestereo::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| match e {
        spherestereo::Error::Io(source) => CliError::io(path, source),
        other => CliError::Usage(format!("{}: {other}", path.display())),
    })
}
