//! Library side of the `capsformer` command: run configuration and the
//! command implementations, kept here so tests can drive them directly.

pub mod commands;
pub mod run_config;

pub use commands::{Overrides, Variant};
pub use run_config::{RunConfig, TaskSettings};
