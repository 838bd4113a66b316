//! Experiment runner: configs and presets, run directories, sweeps and the
//! acceptance suite.

pub mod acceptance;
pub mod config;
pub mod error;
pub mod overlay;
pub mod run;
pub mod sweep;

pub use error::CliError;
