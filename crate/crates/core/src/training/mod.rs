//! Loss objectives, predictor pre-training and calibration, and the joint training loop.

mod loss;
mod trainer;

pub use loss::{
    loss_supervised, loss_unsupervised, rationale_term, GateReading, GateSource, LossConfig,
    LossMode,
};
pub use trainer::{
    batch_mean, compute_hsa_indicator, instance_loss, pretrain_predictor, save_log, train,
    train_adapted_predictor, train_full_input, train_predictor, write_log, EarlyStopping,
    LogRecord, PredictorTraining, TrainConfig, TrainOutcome, Verdict,
};
