//! Command-line driver for the speaker/follower experiments. Every
//! subcommand is also available as a function so experiments can be
//! scripted in-process.

pub mod checkpoints;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod grid;
pub mod manifest;

pub use config::Settings;
pub use error::{exit_code, CliError};
