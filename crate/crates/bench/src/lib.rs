//! Experiment configuration, pipelines and output for the `area` command.

pub mod config;
pub mod experiments;
pub mod manifest;
pub mod stats;
