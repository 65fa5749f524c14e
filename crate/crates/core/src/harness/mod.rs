//! Configuration, metrics, experiment runners and the command-line front end.

pub mod cli;
pub mod config;
pub mod experiments;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
