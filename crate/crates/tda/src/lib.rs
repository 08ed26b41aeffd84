//! Files, run configuration and the `tda` command line around `tda-core`.

pub mod cli;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod error;
pub mod formats;

pub use error::CliError;
