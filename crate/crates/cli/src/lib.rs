//! Configuration, commands, metrics files and checkpoints for the
//! `fedrobust` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;

pub use error::{CliError, CliResult};
