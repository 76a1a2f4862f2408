//! Experiment orchestration: configs, seeded runs, CSV and SVG output.

pub mod config;
pub mod experiment;
pub mod mdp;
pub mod report;
pub mod svg;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, ExperimentOutcome, Trainer};
