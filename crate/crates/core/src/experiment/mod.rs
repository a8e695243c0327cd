//! Experiment configuration, orchestration of the three training modes,
//! metrics persistence and summary reports.

pub mod config;
pub mod metrics;
mod run;

pub use config::{ArchitectureKind, DataPaths, DatasetFormat, DatasetKind, ExperimentConfig, Mode, SEED_ENV};
pub use metrics::{emit_summary, read_metrics, MetricsReport, MetricsRow, MetricsWriter, Scope, HEADER};
pub use run::{
    build_architecture, combo_config, load_datasets, run_experiment, run_experiment_on, sweep_phase_rounds,
    sweep_table, ExperimentOutcome, Summary,
};
