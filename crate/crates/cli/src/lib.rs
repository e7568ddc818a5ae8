//! Command implementations behind the `fedctl` binary.

pub mod commands;
pub mod config;
pub mod dataset_file;
pub mod error;
pub mod output;

pub use commands::{cmd_compare, cmd_dump_data, cmd_inspect, cmd_run, ConfigArgs};
pub use error::CliError;
