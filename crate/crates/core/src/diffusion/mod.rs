//! Denoising diffusion: schedule, conditional noise predictor,
//! classifier-free-guidance training, and ancestral sampling.

pub mod denoiser;
pub mod sample;
pub mod schedule;
pub mod train;

pub use denoiser::{Denoiser, DenoiserConfig, Vocabulary};
pub use sample::{add_noise, cfg_noise, ddpm_step, psi, sample};
pub use schedule::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T};
pub use train::{cfg_train_step, train_diffusion, DiffusionTrainConfig, TrainStats};
