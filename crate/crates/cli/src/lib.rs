//! Command-line front end: run configuration, command implementations and
//! report rendering for the `nsl` binary.

pub mod commands;
pub mod config;
pub mod svg;

pub use config::RunConfig;
