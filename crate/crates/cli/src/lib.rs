//! Library surface of the command-line pipeline: configuration types, grid
//! assembly, and the command implementations, so integration tests can drive
//! the exact code paths the binary runs.

pub mod commands;
pub mod config;
pub mod grid;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum CliError {
    /// Bad configuration or input files; maps to exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Failure during execution; maps to exit code 3.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}
