//! Losses, the optimizer and the training loop.

pub mod losses;
pub mod optimizer;
pub mod trainer;

pub use losses::{bce, dice_loss, focal_bce, seg_loss, LossValue, PROB_EPS};
pub use optimizer::{Ranger, RangerConfig};
pub use trainer::{
    batch_input, evaluate, predict_records, recalibrate_bn, train_model, EpochStats, LossKind, TrainConfig,
    TrainOutcome,
};
