//! Experiment runner: reads a `duality-lab/1` JSON config, runs the
//! requested checks and writes `report.json` and `report.csv`.

pub mod config;
pub mod report;
pub mod runner;

pub use runner::{execute, run, validate, RunError, RunOptions};
