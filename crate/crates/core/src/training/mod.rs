//! Anchor matching, losses, optimization and the staged training loop.

pub mod config;
pub mod loss;
pub mod matching;
pub mod optim;
pub mod trainer;

pub use config::{
    lr_at, FocalConfig, OptimizerConfig, ScheduleConfig, StageConfig, TrainConfig, UnfreezeLevel,
};
pub use loss::{detection_loss, detection_loss_terms, focal_from_logit, focal_loss, LossParts};
pub use matching::{decode_box, encode_box, match_anchors, MatchResult};
pub use optim::Adam;
pub use trainer::{
    evaluate_samples, history_csv, prepare_sample, prepare_samples, split_indices, train,
    train_with_progress, EpochRecord, Sample, TrainOutcome,
};
