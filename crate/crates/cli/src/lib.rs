//! Experiment suite for `d3d-core`: configuration, pipelines, tables, plots
//! and flow visualisations behind the `d3d` command.

pub mod commands;
pub mod config;
pub mod experiments;
pub mod svg;
pub mod viz;

pub use commands::{CliError, CmdResult, Stream};
pub use config::RunConfig;
