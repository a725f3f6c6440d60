use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_MISSING_INPUT: i32 = 4;
pub const EXIT_OUTPUT: i32 = 5;
pub const EXIT_THEORY_FAILED: i32 = 6;
pub const EXIT_REFUSED: i32 = 7;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("input file not found: {0}")]
    MissingInput(PathBuf),

    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{0}")]
    Refused(String),

    #[error("theory checks failed: {0}")]
    TheoryFailed(String),

    #[error(transparent)]
    Core(bapo_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Invalid(_) => EXIT_CONFIG,
            CliError::MissingInput(_) => EXIT_MISSING_INPUT,
            CliError::Output { .. } => EXIT_OUTPUT,
            CliError::Refused(_) => EXIT_REFUSED,
            CliError::TheoryFailed(_) => EXIT_THEORY_FAILED,
            CliError::Core(e) => match e {
                bapo_core::Error::Config(_) | bapo_core::Error::GroupTooSmall(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            },
        }
    }
}

impl From<bapo_core::Error> for CliError {
    fn from(e: bapo_core::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
