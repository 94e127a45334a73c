//! Harness library behind the `latseq` binary: run configuration,
//! checkpointing, metrics, and the train/eval/decode/diagnose/sweep commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod metrics;
pub mod runner;

/// Command errors mapped to process exit codes: config errors exit 2,
/// numeric failures exit 3, anything else 1.
#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Numeric(anyhow::Error),
    Other(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Other(_) => 1,
        }
    }

    pub fn inner(&self) -> &anyhow::Error {
        match self {
            CliError::Config(e) | CliError::Numeric(e) | CliError::Other(e) => e,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.inner())
    }
}
