//! Contrastive link-prediction training: in-batch loss, token pollution,
//! Adam, and the polluted-then-clean schedule.

mod loss;
mod optim;
mod pollution;
mod schedule;

pub use loss::{contrastive_on_tape, inbatch_contrastive_loss};
pub use optim::{optimizer_step, AdamConfig, OptimizerState};
pub use pollution::{
    pollute_input, pollute_tokens, pollute_tokens_with, Decision, PollutionStats, MASK_SHARE, RANDOM_SHARE, SELECT_PROB,
};
pub use schedule::{
    log_to_csv, train_two_stage, LogRow, Split, StageConfig, StageSummary, TrainData, TrainOutcome, TrainSchedule,
    LOG_HEADER,
};
