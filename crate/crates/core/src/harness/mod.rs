//! Experiment configuration, the training loop, metrics files,
//! checkpoints and hyperparameter sweeps.

mod checkpoint;
mod config;
mod metrics;
pub mod profiles;
mod runner;
mod sweep;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ArchSpec, AugmentConfig, DatasetSpec, ExperimentConfig, LossSpec};
pub use metrics::{read_csv, read_json, read_summary, write_csv, write_json, write_summary, CsvLog, Summary};
pub use runner::{
    evaluate, run_experiment, Evaluation, Preprocess, RunResult, Trainer, CHECKPOINT_FILE, CONFIG_TOML, METRICS_CSV,
    METRICS_JSON, SUMMARY_JSON,
};
pub use sweep::{
    apply_overrides, rank_best, refit_best, run_sweep, Distribution, SweepMode, SweepResult, SweepSpec, TrialOutcome,
    SWEEP_JSON,
};
