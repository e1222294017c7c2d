//! Experiment orchestration: config, training, inference, evaluation,
//! ablation studies and checkpoints.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod infer;
pub mod train;

pub use ablation::{run_ablation, train_or_load, AblationKind};
pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use infer::{evaluate, report_for, sliding_window_infer, sliding_window_logits, window_starts};
pub use train::{train, LmWeights, TrainOutcome};
