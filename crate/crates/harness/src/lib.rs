//! Configuration, sweep execution and output files for the `prunelab` CLI.

pub mod cell;
pub mod config;
pub mod error;
pub mod output;
pub mod presets;
pub mod range;
pub mod sweep;
