//! Experiment orchestration: configs, runs, metrics, checkpoints,
//! evaluation and plots.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod plot;
pub mod run;

pub use checkpoint::{checkpoint_config_hash, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{ExperimentConfig, RunMode, DEFAULT_CONFIG_TOML};
pub use eval::{evaluate, Evaluation};
pub use metrics::{read_metrics, retain_metrics, MetricsRecord, MetricsWriter};
pub use plot::{plot_curves, PlotKind};
pub use run::{
    run_ablation, run_experiment, run_experiment_with, run_seed, run_sensitivity, run_step1, run_step2, summarize,
    AblationTable, ExperimentSummary, MeanStd, SeedResult, SensitivityReport, SENSITIVITY_LAMBDAS, SENSITIVITY_MARGINS,
};
