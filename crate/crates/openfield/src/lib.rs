//! File formats, run manifests, configuration and pipeline commands for
//! [`openfield_core`].

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;

pub use error::{CliError, Result};
