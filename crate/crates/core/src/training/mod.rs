//! Loss, optimizer, model assembly, gradient checking and the training loop.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::{load_model, save_model, Manifest};
pub use config::{Config, ModelConfig, OptimizerConfig, Schedule, TrainingConfig};
pub use gradcheck::{grad_check, GradCheckReport, Selection};
pub use loss::{cross_entropy, LossReport};
pub use model::{
    argmax_labels, backward, forward, init_params, Architecture, Forward, Gradients, LevelPlans,
    ModelParams, Prepared, IGNORE_LABEL,
};
pub use optim::{sgd_step, OptimizerState};
pub use train::{train, EpochLog, EpochLogWriter, PlanCache, TrainOutcome};
