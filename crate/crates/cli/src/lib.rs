//! Command-line front end for `msof-core`: file formats, configuration,
//! subcommands and the replicated simulation benchmark.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use commands::{run, run_from, Cli};
