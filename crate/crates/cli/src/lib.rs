//! Experiment runner behind the `relcomm` binary: configs, recipes over
//! seeds, run directories and across-seed summaries.

pub mod config;
pub mod run;
pub mod summary;

pub use config::{load_config, parse_config, ExperimentConfig, Recipe};
pub use run::{game_config, run_dir, run_experiment, runs_root, RUNS_DIR_ENV};
pub use summary::{mean_se, summarize, Stat, Summary, UnitResult};
