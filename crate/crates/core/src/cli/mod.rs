//! Experiment runner: config parsing, dataset ingestion and CSV-emitting
//! experiments.

pub mod config;
pub mod experiments;
pub mod movielens;

pub use config::{parse_config, parse_config_with_seed, ConfigErrors, ExperimentConfig, ExperimentKind};
pub use experiments::{run_experiment, ExperimentError, RunSummary};
pub use movielens::{ingest_movielens, split_train_test, Ratings};
