//! Classifier losses, learning-rate scheduling and the two-phase trainer.

mod losses;
mod schedule;
mod trainer;

pub use losses::{
    bce, bce_logit, selection_score, total_loss, weights_from_phase1_auc, LossWeights, SelectionWeights, BCE_EPS,
};
pub use schedule::{EarlyStopping, PlateauScheduler, TrainSchedule};
pub use trainer::{
    predict, train_two_phase, validation_metrics, BestEpoch, EpochLog, Phase, Phase1Result, Predictions, TaskMode, PHASE1_AUC_FLOOR,
    TrainOutcome, Trainer, ValMetrics, PHASE1_FROZEN,
};
