use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing {}: run `dwt {producer}` with this config first", missing.display())]
    Dependency { missing: PathBuf, producer: &'static str },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed artifact {}: {message}", path.display())]
    Artifact { path: PathBuf, message: String },

    /// The command ran but its postcondition does not hold.
    #[error("{0}")]
    Check(String),

    #[error(transparent)]
    Core(#[from] dwt_core::Error),

    #[error(transparent)]
    Nn(#[from] dwt_nn::NnError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
