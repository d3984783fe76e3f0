//! Loss head, optimizers and the training loop.

mod loss;
mod optimizer;
mod train;

pub use loss::{cross_entropy_loss, softmax};
pub use optimizer::{update_sigmas, Optimizer, OptimizerConfig, OptimizerKind, StepOutcome};
pub use train::{
    train, EpochMetrics, GradientMethod, TrainConfig, BP_LEARNING_RATE, LR_LEARNING_RATE,
    SIGMA_LEARNING_RATE,
};
