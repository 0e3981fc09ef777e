//! Library side of the `gnnplus` command-line tool, exposed so the commands
//! can be driven from tests.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunSpec;
pub use error::{CliError, Result};
