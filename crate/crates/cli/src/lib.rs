//! Dataset ingestion, run configuration and subcommands behind the `favit`
//! binary.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

pub use error::{CliError, Result};
