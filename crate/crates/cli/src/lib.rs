//! Experiment harness for the sliding-window calibration estimator.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod config;
pub mod data;
pub mod experiment;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}, line {line}: {message}")]
    Csv { path: PathBuf, line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] bodycal::biomech::BiomechError),
    #[error(transparent)]
    Estimator(#[from] bodycal::window::WindowError),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}
