//! Twin-experiment driver: configuration, setup, cycling and records.

pub mod config;
pub mod metrics;
pub mod record;
pub mod run;
pub mod setup;
pub mod validate;

pub use config::{ExperimentConfig, Method, ModelConfig, Scaling};
pub use record::{CycleRecord, Failure, Metadata, RunRecord};
pub use run::{generate_truth_and_obs, run_twin_experiment, run_with_observer, CycleView, TruthRun};
pub use setup::Experiment;
