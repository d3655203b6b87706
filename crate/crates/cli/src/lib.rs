//! Command-line pipeline for driftmask: configuration, provenance
//! manifests and the subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use commands::run;
