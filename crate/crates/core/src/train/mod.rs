//! Training harness: configuration, the optimization loop, and ablations.

mod ablate;
mod config;
mod runner;

pub use ablate::{ablate, default_grid, write_ablation_csv, AblationRow};
pub use config::TrainConfig;
pub use runner::{
    run_training, IterationLog, LossBreakdown, RunSummary, Trainer, GRAD_CLIP_NORM, METRICS_HEADER,
};
