//! File formats, verification suites and subcommand bodies behind the
//! `regstream` command-line tool.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod matfile;
pub mod render;
pub mod verify;

pub use commands::{CliError, CliResult};
