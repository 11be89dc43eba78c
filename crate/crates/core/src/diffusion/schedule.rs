//! Variance schedule for the denoising diffusion process.
//!
//! A linear β schedule with all derived quantities (α, ᾱ) precomputed in
//! `f64` so schedule identities hold to 1e-12 and downstream samplers never
//! re-derive products.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// beta[t] for t in 1..=T; index 0 is an unused placeholder.
    beta: Vec<f64>,
    /// alpha[t] = 1 − beta[t]; index 0 unused.
    alpha: Vec<f64>,
    /// alpha_bar[t] = Π_{s≤t} alpha[s]; alpha_bar[0] = 1 by convention so
    /// timestep 0 is a well-defined identity.
    alpha_bar: Vec<f64>,
}

/// Default step count.
pub const DEFAULT_T: usize = 50;
/// Default linear β endpoints.
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl NoiseSchedule {
    /// Linear β interpolation from `beta_start` at t=1 to `beta_end` at t=T.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        if t_max < 1 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut beta = vec![f64::NAN; t_max + 1];
        let mut alpha = vec![f64::NAN; t_max + 1];
        let mut alpha_bar = vec![f64::NAN; t_max + 1];
        alpha_bar[0] = 1.0;
        for t in 1..=t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                (t - 1) as f64 / (t_max - 1) as f64
            };
            beta[t] = beta_start + (beta_end - beta_start) * frac;
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }

    pub fn t_max(&self) -> usize {
        self.beta.len() - 1
    }

    /// β_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_max(), "beta index {t} out of range");
        self.beta[t]
    }

    /// α_t for t in 1..=T.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_max(), "alpha index {t} out of range");
        self.alpha[t]
    }

    /// ᾱ_t for t in 0..=T (ᾱ_0 = 1).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max(), "alpha_bar index {t} out of range");
        self.alpha_bar[t]
    }
}
