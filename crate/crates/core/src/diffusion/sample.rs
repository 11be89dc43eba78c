//! Forward noising, guidance arithmetic, and the ancestral sampling step.
//!
//! All schedule coefficients are applied in `f64` per element before
//! rounding back to the `f32` tensor domain, which keeps identity cases
//! (t=0, the one-step round trip, s ∈ {0, 1}) at or near machine precision.

use super::denoiser::Denoiser;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Diffuse `z0` to timestep `t`: `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·eps`.
/// `t = 0` returns `z0` unchanged (ᾱ_0 = 1).
pub fn add_noise(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if t > sched.t_max() {
        return Err(Error::invalid(format!(
            "timestep {t} out of range 0..={}",
            sched.t_max()
        )));
    }
    if z0.shape() != eps.shape() {
        return Err(Error::invalid(format!(
            "signal shape {:?} does not match noise shape {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    if t == 0 {
        return Ok(z0.clone());
    }
    let ab = sched.alpha_bar(t);
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    Ok(z0.zip(eps, |z, e| (signal * z as f64 + noise * e as f64) as f32))
}

/// Condition-specific guidance direction:
/// `ψ(z_t, c) = ε_θ(z_t, c) − ε_θ(z_t)`.
///
/// Both predictions run as one batched forward pass; the label must be a
/// real vocabulary entry (the null token is unrepresentable here — ψ of
/// null is identically zero and would signal a caller bug).
pub fn psi(den: &Denoiser, z_t: &Tensor, t: usize, label: u32) -> Result<Tensor> {
    let (eps_c, eps_u) = predict_pair(den, z_t, t, label)?;
    Ok(eps_c.zip(&eps_u, |c, u| c - u))
}

/// One batched forward yielding (conditional, unconditional) predictions.
fn predict_pair(den: &Denoiser, z_t: &Tensor, t: usize, label: u32) -> Result<(Tensor, Tensor)> {
    let mut shape = vec![2];
    shape.extend_from_slice(z_t.shape());
    let mut data = Vec::with_capacity(z_t.len() * 2);
    data.extend_from_slice(z_t.data());
    data.extend_from_slice(z_t.data());
    let stacked = Tensor::new(shape, data);
    let out = den.predict(&stacked, &[t, t], &[Some(label), None])?;
    Ok((
        crate::tensor::unstack_one(&out, 0),
        crate::tensor::unstack_one(&out, 1),
    ))
}

/// Guided noise estimate `ε_θ(z_t) + s·ψ(z_t, c)`.
///
/// `s = 0` returns the unconditional prediction bit-exactly and `s = 1` the
/// conditional one; both short-circuit to a single forward pass.
pub fn cfg_noise(den: &Denoiser, z_t: &Tensor, t: usize, label: u32, s: f64) -> Result<Tensor> {
    if s < 0.0 {
        return Err(Error::invalid(format!("guidance scale must be >= 0, got {s}")));
    }
    if s == 0.0 {
        // Validate the label anyway so a bad call site fails loudly.
        den.vocab.row(label)?;
        return den.predict_one(z_t, t, None);
    }
    if s == 1.0 {
        return den.predict_one(z_t, t, Some(label));
    }
    let (eps_c, eps_u) = predict_pair(den, z_t, t, label)?;
    Ok(eps_u.zip(&eps_c, |u, c| {
        (u as f64 + s * (c as f64 - u as f64)) as f32
    }))
}

/// One ancestral denoising step from `z_t` to `z_{t−1}` given a noise
/// estimate:
///
/// `z_{t−1} = (1/√α_t)·(z_t − ((1−α_t)/√(1−ᾱ_t))·ε̂) + σ_t·ξ`
///
/// with `σ_t = √β_t` for t > 1 and `σ_1 = 0`. The final step draws no
/// randomness and uses the signal-recovery form
/// `(z_1 − √(1−ᾱ_1)·ε̂)/√ᾱ_1`, which makes the one-step noising round trip
/// an (up to rounding) exact inverse.
pub fn ddpm_step(
    z_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    if t == 0 || t > sched.t_max() {
        return Err(Error::invalid(format!(
            "ancestral step needs 1 <= t <= {}, got {t}",
            sched.t_max()
        )));
    }
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::invalid(format!(
            "latent shape {:?} does not match noise-estimate shape {:?}",
            z_t.shape(),
            eps_hat.shape()
        )));
    }
    eps_hat.ensure_finite("ddpm_step noise estimate")?;
    if t == 1 {
        let ab = sched.alpha_bar(1);
        let noise_coef = (1.0 - ab).sqrt();
        let signal = ab.sqrt();
        return Ok(z_t.zip(eps_hat, |z, e| {
            ((z as f64 - noise_coef * e as f64) / signal) as f32
        }));
    }
    let alpha = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let eps_coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    let sigma = sched.beta(t).sqrt();
    let mut out = z_t.zip(eps_hat, |z, e| {
        (inv_sqrt_alpha * (z as f64 - eps_coef * e as f64)) as f32
    });
    for v in out.data_mut() {
        *v = (*v as f64 + sigma * rng.normal() as f64) as f32;
    }
    Ok(out)
}

/// Full ancestral sampling from pure noise. `cond = None` samples the
/// unconditional model; otherwise classifier-free guidance at scale `s`.
pub fn sample(
    den: &Denoiser,
    sched: &NoiseSchedule,
    shape: &[usize],
    cond: Option<u32>,
    s: f64,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let mut z = rng.normal_tensor(shape.to_vec());
    for t in (1..=sched.t_max()).rev() {
        let eps_hat = match cond {
            Some(label) => cfg_noise(den, &z, t, label, s)?,
            None => den.predict_one(&z, t, None)?,
        };
        z = ddpm_step(&z, t, &eps_hat, sched, rng)?;
    }
    z.ensure_finite("sample output")?;
    Ok(z)
}
