//! Joint optimization of every loss in one backward pass, checkpoints, metrics logs,
//! evaluation suites and the ablation ladder.

pub mod checkpoint;
mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
mod optim;
mod run;
mod step;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{LrSchedule, Precision, TrainConfig};
pub use optim::{clip_global_norm, decays, global_norm, AdamConfig, AdamState};
pub use run::{
    ablation_ladder, config_diff, image_params, read_metrics, read_summary, run_training, EvalReport, EvalSuite, RunOptions,
    RunSummary, CHECKPOINT_FILE, METRICS_FILE, SUMMARY_FILE, TIMING_FILE,
};
pub use step::{build_objective, learning_rate, train_step, MetricsRow, Objective, TrainState};
