//! Losses, optimizer, single-stage training and the AR-to-diffusion pipeline.

mod loss;
mod optim;
mod pipeline;
mod stage;

pub use loss::{
    ar_loss, corrupt, corrupt_batch, corrupt_with_proportion, cross_entropy, denoise_picks,
    next_token_picks, sundae_loss, sundae_loss_detailed, sundae_loss_from_corrupted,
    DiffusionSettings, LossOutput, SundaeOutput,
};
pub use optim::{clip, default_lr, global_norm, Adam, AdamConfig, LrSchedule};
pub use pipeline::{
    run_ar2diff, Ar2DiffOutcome, Offset, PipelineData, PipelineManifest, StagePlan, StageRecord,
    Variant,
};
pub use stage::{
    stage_loss, train, EarlyStopping, StageIo, StageKind, StageOutcome, StageSpec, StageStart,
    Validator,
};
