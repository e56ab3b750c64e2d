//! Training and evaluation orchestration.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod plots;
pub mod report;
pub mod run;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::TrainConfig;
pub use eval::{eval_csv, evaluate, EvalOptions, EvalRow, Severity, EVAL_HEADER};
pub use metrics::{EpochMetrics, MetricsLog};
pub use report::{report_masks, MaskReport};
pub use train::{accuracy, prepare_network, train, train_network, StepEvent, TrainRun};
