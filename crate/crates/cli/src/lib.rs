//! Command-line front end and experiment tooling: config files, the
//! experiment runner, the adapter architecture grid search, activation
//! heatmap export and run comparison reports.

pub mod compare;
pub mod config;
pub mod experiment;
pub mod grid;
pub mod heatmap;
pub mod pool;
pub mod verify;

pub use compare::{compare_report, CompareReport};
pub use config::{load_experiment, ExperimentConfig, Mode};
pub use experiment::{run_experiment, Summary};
pub use grid::{grid_search, GridConfig, GridSpec};
pub use heatmap::export_heatmap;
