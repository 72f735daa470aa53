//! Command-line harness: configuration, mode dispatch, reports.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{exit_code, run, Summary};
pub use config::{Mode, Overrides, RunConfig};
