use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_VERIFICATION: i32 = 2;
pub const EXIT_CONFIG: i32 = 64;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Numeric {
        stage: &'static str,
        #[source]
        source: macrohydro::Error,
    },

    #[error("{0}")]
    Failed(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            _ => EXIT_ERROR,
        }
    }

    pub fn numeric(stage: &'static str) -> impl FnOnce(macrohydro::Error) -> CliError {
        move |source| CliError::Numeric { stage, source }
    }
}
