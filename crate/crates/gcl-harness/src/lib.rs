//! Experiment harness: configuration, multi-seed runs, checkpoints,
//! ablation grids and CSV outputs.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod features;
pub mod output;
pub mod runner;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
