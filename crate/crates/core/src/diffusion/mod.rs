//! Conditional denoising diffusion over action plans.

mod checkpoint;
mod model;
mod sample;
mod schedule;
mod train;

pub use checkpoint::{ArrayEntry, Checkpoint, CheckpointHeader, ScheduleParams, GIT_DESCRIBE, MAGIC};
pub use model::{
    mean_loss, sample_from_channel_major, to_channel_major, tree_reduce, Architecture, ChunkGradients,
    DenoiserModel, ForwardCache, NoisedExample, UNet,
};
pub use sample::{posterior_step, sample, EpsPredictor, PlanSample, SamplerConfig, Warmstart};
pub use schedule::{forward_noise, NoiseSchedule};
pub use train::{ema_update, loss_and_gradients, train, AdamW, EpochRecord, TrainConfig, TrainLog};
