//! Experiment runner behind the `htreg` command line tool.

pub mod analyze;
pub mod config;
pub mod gradcheck;
pub mod report;
mod run;

pub use analyze::{analysis_csv, analyze_model, weighted_alpha_total, LayerAnalysis};
pub use config::{ConfigError, DatasetConfig, ExperimentConfig};
pub use gradcheck::{run_gradcheck, GradcheckEntry, GradcheckReport, GRADCHECK_TOLERANCE};
pub use report::{mean_and_stderr, metrics_csv, summary_csv, RunSummary};
pub use run::{
    load_datasets, run_experiment, run_paths, summary_path, ExperimentError, ExperimentOutcome, RunPaths,
};
