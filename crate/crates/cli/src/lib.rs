//! Command-line pipeline: generate, profile, plan, remap, simulate, compare.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod config;
pub mod pipeline;

pub use config::RunConfig;
pub use pipeline::{Bench, BenchRun, Context, Strategy};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] shardplan_core::Error),
    #[error("config {path}: {msg}")]
    Config { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Usage(String),
    #[error("{path} not found; {hint}")]
    Missing { path: PathBuf, hint: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
