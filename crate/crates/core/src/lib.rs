//! SONA: semantic outlier generation via nuisance awareness.
//!
//! A self-contained CPU workbench that trains a small conditional denoising
//! diffusion model on synthetic shape images, edits training images into
//! *semantic outliers* — the foreground concept is replaced while background
//! nuisance structure is retained — and uses those outliers as exposure data
//! for an out-of-distribution detector trained with cross-entropy, outlier
//! exposure, and a mutual-information penalty between ID features and their
//! paired outliers.
//!
//! Module map:
//! * [`tensor`], [`rng`], [`error`] — plain data plumbing,
//! * [`nn`] — differentiable graph, layers, optimizer, gradient checking,
//! * [`diffusion`] — noise schedule, conditional denoiser, training, sampling,
//! * [`guidance`] — magnitude masks and the guided outlier sampler,
//! * [`data`] — synthetic benchmark generation and the tensor archive format,
//! * [`detector`] — encoder/classifier with OE and MI losses, energy scoring,
//! * [`eval`] — AUROC/FPR metrics, retention/shift probes, report writing,
//! * [`diagnostics`] — the finite-difference gradient suite over all blocks.

pub mod error;
pub mod rng;
pub mod tensor;

pub mod nn;

pub mod data;
pub mod diagnostics;
pub mod diffusion;
pub mod detector;
pub mod eval;
pub mod guidance;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
