//! Experiment plumbing for mpdlab: configuration files, seeded batch runs
//! and sweeps, report assembly and the motion-conflict benchmark.

pub mod bench;
pub mod config;
pub mod error;
pub mod runner;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
