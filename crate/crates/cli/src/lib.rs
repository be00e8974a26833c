//! Command-line pipeline: scenario and dataset generation, training,
//! evaluation, experiment protocols and gradient checks, each driven by a
//! JSON run manifest.

pub mod commands;
pub mod manifest;

use thiserror::Error;

pub use manifest::{parse_config, parse_manifest, Command, RunManifest};

/// Environment variable overriding the manifest's output directory.
pub const OUTPUT_DIR_ENV: &str = "MATELOC_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{0}")]
    Runtime(String),

    /// A check ran to completion and failed its gate.
    #[error("{0}")]
    Gate(String),

    #[error(transparent)]
    Core(#[from] mateloc::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for usage and manifest errors, 1 for everything that fails at run
    /// time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            _ => 1,
        }
    }
}
