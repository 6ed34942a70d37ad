//! Configuration, runs, sweeps, checkpoints and output files for the
//! `c2f` command-line tool.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod output;
pub mod run;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::HarnessError;
