//! Co-occurrence batch sampling and the two-stage training loop.

mod sampler;
mod trainer;

pub use sampler::{make_batch, ClassIndex, SamplerConfig};
pub use trainer::{
    run_two_stage, train_stage, EpochSnapshot, EvalHook, Stage, StageConfig, StageContext,
    StepRecord, TrainConfig, TrainHistory, TwoStageResult, HISTORY_FILE,
};
