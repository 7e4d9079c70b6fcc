//! Files and command line around `bcsnet-core`: PNG datasets, TOML
//! configs, checkpoints, CSV reports and panel figures.

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod io;
pub mod pipeline;
pub mod report;
pub mod viz;

pub use error::{Error, Result};
