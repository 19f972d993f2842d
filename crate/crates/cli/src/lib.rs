//! Batch front end: dataset generation, training, delayed evaluation,
//! theory suites and the belief benchmark, driven by one TOML config.

pub mod commands;
pub mod config;
pub mod files;

use std::path::PathBuf;

pub use config::{load, ExperimentConfig, Profile};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] dtcorl_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing input {0}: run the producing command first")]
    Missing(PathBuf),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    /// 1 usage/config, 2 runtime abort, 3 verification failure.
    pub fn exit_code(&self) -> u8 {
        use dtcorl_core::Error as E;
        match self {
            CliError::Config(_) => 1,
            CliError::Core(E::Config(_) | E::NothingToVerify) => 1,
            CliError::Verification(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
