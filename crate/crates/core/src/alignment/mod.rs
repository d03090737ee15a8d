//! Training objective, loop and gradient verification.

pub mod loss;
pub mod train;

pub use loss::{
    clip_text_loss, contrastive_loss, loss_breakdown, mse_loss_text, mse_loss_visual, overall_loss, LossBreakdown,
    LossConfig, LossTerms, Tasks, TextGranularity,
};
pub use train::{
    finite_diff_check, fit, initial_state, reference_grad_check, split_validation, train, validation_retrieval,
    AlignmentConfig, EpochRecord, LogRecord, StepRecord, TrainEvent, TrainState,
};
