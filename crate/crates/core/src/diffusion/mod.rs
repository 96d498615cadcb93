//! Denoising diffusion: noise schedule, forward process, objectives, ancestral
//! sampling, weight averaging, checkpoints and the training loop.

pub mod checkpoint;
mod ema;
pub mod losses;
mod process;
mod schedule;
pub mod train;

pub use checkpoint::{Checkpoint, OptimizerState};
pub use ema::EmaState;
pub use losses::{losses_with, simple_loss, LossParts, NoiseDraw};
pub use process::{
    gaussian_kl, p_mean_variance, p_sample_step, q_posterior, q_sample, q_sample_with, sample_loop, sample_loop_at, split_output, vlb_terms, Denoiser,
    UNetDenoiser,
};
pub use schedule::{DiffusionConfig, NoiseSchedule, VarianceMode};
pub use train::{train, StepRecord, TrainReport, TrainSettings};
