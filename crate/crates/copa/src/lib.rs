//! Command-line front end for `copa-core`: configs, CSV datasets, run
//! directories, parallel training and reports.

pub mod cli;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod store;

pub use error::{CliError, Result};
