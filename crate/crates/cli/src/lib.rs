//! Command-line front end over the quantizer and the PIM simulator.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};
