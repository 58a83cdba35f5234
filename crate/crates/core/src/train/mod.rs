//! Classifier and generator training, and code statistics.

mod classifier;
mod config;
mod dgn;
mod stats;

pub use classifier::{accuracy, argmax, train_classifier, BatchSampler, ClassifierRun};
pub use config::{log_to_csv, parse_log, write_log, LogRow, LossWeights, OptimizerKind, Schedule, TrainConfig, LOG_HEADER};
pub use dgn::{dgn_losses, reconstruction_mse, train_dgn, DgnParts, DgnRun, Frozen, D_LOSS_FLOOR, D_PATIENCE};
pub use stats::{compute_code_stats, CodeStats};
