//! Config-driven stages: generate, train-base, finetune, sweep, analyze and
//! evaluate. Each stage reads its inputs from and writes its artifacts to
//! the run's output directory.

mod commands;
mod config;

pub use commands::*;
pub use config::{BaseSchedule, ExperimentConfig};
