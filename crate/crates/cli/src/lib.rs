//! File formats, training drivers and the command-line interface around
//! `guided-inpaint-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;
pub mod report;
pub mod training;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};
