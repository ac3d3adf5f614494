//! Experiment orchestration: declarative TOML configs, seeded protocol
//! execution, and deterministic report/table emission.

pub mod config;
pub mod report;
pub mod runner;

pub use config::{apply_overrides, load_config, parse_config, ExperimentConfig, Overrides};
pub use report::{load_report, RunReport};
pub use runner::{ablation_subdir, regenerate_tables, run_ablation, run_experiment};
