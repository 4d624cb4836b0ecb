//! Experiment orchestration: configuration, runs, evaluation and sweeps.

pub mod config;
pub mod run;
pub mod sweep;

pub use config::{parse_config, parse_config_with_seed, DataConfig, ExperimentConfig, Mode, RgaSettings};
pub use run::{
    build_dataset, evaluate, load_checkpoint, load_or_build_dataset, run_experiment,
    run_experiment_with_cache, run_in_memory, train_model, Dataset, EvalOutcome, RunSummary,
    TrainOutcome,
};
pub use sweep::{apply_axis, sweep, SweepAxis, SweepRow, SweepTable};
