//! Configuration and subcommands of the `giuda` command-line tool.

pub mod commands;
pub mod config;

pub use commands::*;
pub use config::RunConfig;
