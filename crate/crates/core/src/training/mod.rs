//! Losses, optimizer, training loop and evaluation metrics.

mod fit;
mod loss;
mod metrics;
mod optimizer;
mod pairs;

pub use fit::{fit, EpochRecord, FitResult, TrainConfig};
pub use loss::{
    batch_loss, batch_loss_on_tape, dpo_loss, policy_loss, reward_loss, total_loss, LossBreakdown,
    LossObjective, LossVars, LossWeights, PairSample, RewardLoss, PROB_FLOOR,
};
pub use metrics::{
    classification_metrics, confusion_matrix, evaluate, Averaging, ClassificationMetrics, EvalReport,
};
pub use optimizer::{Adam, AdamConfig};
pub use pairs::build_pairs;
