//! Command-line front end: CSV bundles, run settings, manifests and subcommands.

mod commands;
pub mod config;
pub mod io;
pub mod manifest;

pub use commands::{run, Cli, CliError, DEFAULT_TOLERANCE};
