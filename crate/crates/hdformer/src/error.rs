//! Command-level errors and their process exit codes.

use std::path::PathBuf;

use hdformer_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for configuration, 3 for data and I/O, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        fn root(e: &CoreError) -> &CoreError {
            match e {
                CoreError::Expert { source, .. } => root(source),
                other => other,
            }
        }
        let msg = e.to_string();
        match root(&e) {
            CoreError::Config(_) => CliError::Config(msg),
            CoreError::NonFinite(_) => CliError::Numeric(msg),
            _ => CliError::Data(msg),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
