//! Training/experiment harness: run configuration, Adam, checkpointing,
//! the training loop, experiment presets (ablations, sweeps), heatmap
//! export, and the whole-model gradient check.

pub mod checkpoint;
pub mod config;
pub mod experiments;
pub mod heatmap;
pub mod modelcheck;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Progress};
pub use config::{LossConfig, OptimConfig, Overrides, RunConfig};
pub use experiments::{
    ablation_arms, median, run_ablation_suite, run_hyperparam_sweep, AblationTable, ArmResult,
    ArmSpec, ArmSummary, SweepParam, SweepRow, SweepTable,
};
pub use heatmap::{export_expert_heatmap, HeatmapData, HeatmapInput};
pub use modelcheck::{model_grad_check, ModelCheckOutcome};
pub use optim::Adam;
pub use train::{
    evaluate_model, restore_trainable, resume, train, MetricsRow, TrainOutcome, Trainer,
};
