//! Wiring for the `talkface` command: run configuration and one function
//! per pipeline stage.

pub mod commands;
pub mod config;

pub use config::RunConfig;

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: missing input {path}")]
    MissingInput { stage: &'static str, path: PathBuf },
    #[error("{stage}: {path}: {source}")]
    Io {
        stage: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}
