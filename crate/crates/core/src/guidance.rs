//! Semantic-outlier guidance: region masks from condition-sensitivity maps,
//! the three composed guidance terms, and outlier generation by partial
//! noising + guided denoising.
//!
//! The central quantity is ψ(z_t, c) — the gap between conditional and
//! unconditional noise predictions. Positions where |ψ| is largest carry the
//! condition's semantics; positions where it is smallest carry nuisance
//! (background) content. Guided generation removes source-class semantics,
//! preserves nuisance positions, and injects target-class semantics, all
//! recomputed every denoising step.

use crate::diffusion::denoiser::Denoiser;
use crate::diffusion::sample::{add_noise, ddpm_step, psi};
use crate::diffusion::schedule::NoiseSchedule;
use crate::data::archive::Archive;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{stack, Tensor};

// ── Masks ───────────────────────────────────────────────────────────────

/// Binary mask selecting exactly `⌈λ·N⌉` positions with the largest values,
/// ties broken toward the lowest flat index.
pub fn top_fraction_mask(a: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(0.0..=0.5).contains(&lambda) {
        return Err(Error::invalid(format!(
            "mask fraction must lie in [0, 0.5], got {lambda}"
        )));
    }
    let n = a.len();
    let k = (lambda * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    // Descending by value; ascending by index among ties.
    order.sort_by(|&i, &j| {
        a.data()[j]
            .partial_cmp(&a.data()[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut mask = Tensor::zeros(a.shape().to_vec());
    for &i in order.iter().take(k) {
        mask.data_mut()[i] = 1.0;
    }
    Ok(mask)
}

/// The three region masks used by guided generation.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMasks {
    /// Largest-|ψ| positions for the source condition (its semantics).
    pub m_s_id: Tensor,
    /// Smallest-|ψ| positions for the source condition (its nuisance),
    /// chosen disjoint from `m_s_id`.
    pub m_n_id: Tensor,
    /// Largest-|ψ| positions for the target condition.
    pub m_s_ood: Tensor,
}

/// Compute all masks from the two sensitivity maps. Each mask has exactly
/// `⌈λ·N⌉` ones; the semantic and nuisance masks of the source condition
/// are disjoint by construction.
pub fn get_masks(psi_id: &Tensor, psi_ood: &Tensor, lambda: f64) -> Result<GuidanceMasks> {
    if psi_id.shape() != psi_ood.shape() {
        return Err(Error::invalid(format!(
            "sensitivity maps disagree in shape: {:?} vs {:?}",
            psi_id.shape(),
            psi_ood.shape()
        )));
    }
    if !(0.0..=0.5).contains(&lambda) {
        return Err(Error::invalid(format!(
            "mask fraction must lie in [0, 0.5], got {lambda}"
        )));
    }
    let n = psi_id.len();
    let k = (lambda * n as f64).ceil() as usize;
    if 2 * k > n {
        return Err(Error::invalid(format!(
            "cannot place two disjoint masks of {k} elements in a tensor of {n}"
        )));
    }
    let abs_id = psi_id.map(f32::abs);
    let m_s_id = top_fraction_mask(&abs_id, lambda)?;

    // Nuisance mask: the k smallest magnitudes (ties toward the lowest
    // index), skipping positions already claimed by the semantic mask so
    // the two are disjoint even when ties straddle both selection fronts.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        abs_id.data()[i]
            .partial_cmp(&abs_id.data()[j])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut m_n_id = Tensor::zeros(psi_id.shape().to_vec());
    let mut placed = 0;
    for &i in &order {
        if placed == k {
            break;
        }
        if m_s_id.data()[i] == 0.0 {
            m_n_id.data_mut()[i] = 1.0;
            placed += 1;
        }
    }

    let abs_ood = psi_ood.map(f32::abs);
    let m_s_ood = top_fraction_mask(&abs_ood, lambda)?;
    Ok(GuidanceMasks {
        m_s_id,
        m_n_id,
        m_s_ood,
    })
}

// ── Guidance terms ──────────────────────────────────────────────────────

fn check_shapes(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Semantic-removal term: `−m_s_id ⊙ ψ_id`.
pub fn delta_id(m_s_id: &Tensor, psi_id: &Tensor) -> Result<Tensor> {
    check_shapes(m_s_id, psi_id)?;
    Ok(m_s_id.zip(psi_id, |m, p| -(m * p)))
}

/// Nuisance-preservation term: `+m_n_id ⊙ ψ_id`.
pub fn delta_n(m_n_id: &Tensor, psi_id: &Tensor) -> Result<Tensor> {
    check_shapes(m_n_id, psi_id)?;
    Ok(m_n_id.zip(psi_id, |m, p| m * p))
}

/// Semantic-injection term with nuisance positions filtered out:
/// `m_s_ood ⊙ (1 − m_n_id) ⊙ ψ_ood`.
pub fn delta_ood(m_s_ood: &Tensor, m_n_id: &Tensor, psi_ood: &Tensor) -> Result<Tensor> {
    check_shapes(m_s_ood, psi_ood)?;
    check_shapes(m_n_id, psi_ood)?;
    let mut out = psi_ood.clone();
    for ((o, &ms), &mn) in out
        .data_mut()
        .iter_mut()
        .zip(m_s_ood.data())
        .zip(m_n_id.data())
    {
        *o = ms * (1.0 - mn) * *o;
    }
    Ok(out)
}

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TildeTPolicy {
    /// Always noise to this timestep (0 = return inputs unchanged).
    Fixed(usize),
    /// Draw `T̃ ~ U{1..T}` per sample.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SonaConfig {
    /// Guidance scale applied to the composed delta sum.
    pub s: f64,
    /// Mask fraction. Productive runs use (0, 0.5); 0 is accepted and
    /// degenerates to unconditional resampling (exercised by tests).
    pub lambda: f64,
    pub tilde_t: TildeTPolicy,
    /// Base seed for per-sample generation streams.
    pub seed: u64,
}

impl Default for SonaConfig {
    fn default() -> SonaConfig {
        SonaConfig {
            s: 10.0,
            lambda: 0.2,
            tilde_t: TildeTPolicy::Uniform,
            seed: 0,
        }
    }
}

impl SonaConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.s < 0.0 {
            return Err(Error::config(format!(
                "guidance scale must be >= 0, got {}",
                self.s
            )));
        }
        if !(0.0..0.5).contains(&self.lambda) {
            return Err(Error::config(format!(
                "mask fraction must lie in [0, 0.5), got {}",
                self.lambda
            )));
        }
        if let TildeTPolicy::Fixed(t) = self.tilde_t {
            if t > t_max {
                return Err(Error::config(format!(
                    "fixed early-stop timestep {t} exceeds schedule length {t_max}"
                )));
            }
        }
        Ok(())
    }
}

// ── Guided noise prediction ─────────────────────────────────────────────

/// The composed guided noise estimate
/// `ε_θ(z_t) + s·(Δ_ID + Δ_N + Δ_OOD)`, with masks recomputed from fresh ψ
/// values at this timestep.
///
/// The combination is arranged so recomposing from the public pieces —
/// `psi`, `get_masks`, the three delta terms — reproduces the output
/// bit-for-bit: deltas are summed left to right in f32 and folded in as
/// `u + s·sum` per element in f64.
pub fn sona_noise(
    den: &Denoiser,
    z_t: &Tensor,
    t: usize,
    c_id: u32,
    c_ood: u32,
    cfg: &SonaConfig,
) -> Result<Tensor> {
    if c_id == c_ood {
        return Err(Error::invalid(format!(
            "source and target conditions must differ, both are {c_id}"
        )));
    }
    if cfg.s < 0.0 {
        return Err(Error::invalid(format!("guidance scale must be >= 0, got {}", cfg.s)));
    }
    // One batched forward for (unconditional, source, target) predictions.
    let mut shape = vec![3];
    shape.extend_from_slice(z_t.shape());
    let mut data = Vec::with_capacity(z_t.len() * 3);
    for _ in 0..3 {
        data.extend_from_slice(z_t.data());
    }
    let stacked = Tensor::new(shape, data);
    let out = den.predict(&stacked, &[t, t, t], &[None, Some(c_id), Some(c_ood)])?;
    let eps_u = crate::tensor::unstack_one(&out, 0);
    let eps_id = crate::tensor::unstack_one(&out, 1);
    let eps_ood = crate::tensor::unstack_one(&out, 2);
    let psi_id = eps_id.zip(&eps_u, |c, u| c - u);
    let psi_ood = eps_ood.zip(&eps_u, |c, u| c - u);

    let masks = get_masks(&psi_id, &psi_ood, cfg.lambda)?;
    let d_id = delta_id(&masks.m_s_id, &psi_id)?;
    let d_n = delta_n(&masks.m_n_id, &psi_id)?;
    let d_ood = delta_ood(&masks.m_s_ood, &masks.m_n_id, &psi_ood)?;

    let mut result = eps_u;
    for i in 0..result.len() {
        let sum = (d_id.data()[i] + d_n.data()[i]) + d_ood.data()[i];
        let v = result.data()[i] as f64 + cfg.s * sum as f64;
        result.data_mut()[i] = v as f32;
    }
    Ok(result)
}

// ── Outlier generation ──────────────────────────────────────────────────

/// How the per-step noise estimate is produced during guided denoising.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceKind {
    /// Masked three-term composition (the method under study).
    Sona,
    /// Unmasked guidance toward the target condition:
    /// `ε_θ(z_t) + s·ψ(z_t, c_ood)`.
    Global,
    /// Variant: unmasked difference guidance
    /// `ε_θ(z_t) + s·(ψ(z_t, c_ood) − ψ(z_t, c_id))`.
    GlobalDiff,
}

impl GuidanceKind {
    pub fn name(self) -> &'static str {
        match self {
            GuidanceKind::Sona => "sona",
            GuidanceKind::Global => "global",
            GuidanceKind::GlobalDiff => "global-diff",
        }
    }

    pub fn from_name(name: &str) -> Result<GuidanceKind> {
        match name {
            "sona" => Ok(GuidanceKind::Sona),
            "global" => Ok(GuidanceKind::Global),
            "global-diff" => Ok(GuidanceKind::GlobalDiff),
            other => Err(Error::config(format!("unknown guidance kind `{other}`"))),
        }
    }
}

/// Provenance of one generated outlier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutlierRecord {
    pub tilde_t: usize,
    pub c_ood: u32,
    pub seed: u64,
}

fn draw_tilde_t(policy: TildeTPolicy, t_max: usize, rng: &mut SeededRng) -> Result<usize> {
    match policy {
        TildeTPolicy::Fixed(t) => {
            if t > t_max {
                return Err(Error::invalid(format!(
                    "fixed early-stop timestep {t} exceeds schedule length {t_max}"
                )));
            }
            Ok(t)
        }
        TildeTPolicy::Uniform => Ok(rng.int_inclusive(1, t_max)),
    }
}

fn check_pixel_range(x: &Tensor) -> Result<()> {
    for &v in x.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!(
                "input pixel {v} outside the valid range [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Shared generation pipeline: draw T̃, partially noise, denoise with the
/// supplied per-step noise estimator, clamp back to pixel range.
fn run_guided(
    x: &Tensor,
    den_t_max: usize,
    sched: &NoiseSchedule,
    policy: TildeTPolicy,
    rng: &mut SeededRng,
    mut noise_at: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<(Tensor, usize)> {
    check_pixel_range(x)?;
    let tilde_t = draw_tilde_t(policy, den_t_max, rng)?;
    if tilde_t == 0 {
        return Ok((x.clone(), 0));
    }
    let eps = rng.normal_tensor(x.shape().to_vec());
    let mut z = add_noise(x, tilde_t, &eps, sched)?;
    for t in (1..=tilde_t).rev() {
        let eps_hat = noise_at(&z, t)?;
        z = ddpm_step(&z, t, &eps_hat, sched, rng)?;
    }
    Ok((z.map(|v| v.clamp(0.0, 1.0)), tilde_t))
}

/// Generate one outlier from an in-distribution image with masked
/// composition guidance. Returns the image and its provenance record.
pub fn generate_outlier(
    x: &Tensor,
    c_id: u32,
    c_ood: u32,
    den: &Denoiser,
    sched: &NoiseSchedule,
    cfg: &SonaConfig,
    rng: &mut SeededRng,
) -> Result<(Tensor, OutlierRecord)> {
    let seed = rng.seed();
    let (img, tilde_t) = run_guided(x, sched.t_max(), sched, cfg.tilde_t, rng, |z, t| {
        sona_noise(den, z, t, c_id, c_ood, cfg)
    })?;
    Ok((
        img,
        OutlierRecord {
            tilde_t,
            c_ood,
            seed,
        },
    ))
}

/// Baseline: the same pipeline with unmasked guidance (see
/// [`GuidanceKind::Global`] / [`GuidanceKind::GlobalDiff`]).
pub fn generate_outlier_global(
    x: &Tensor,
    c_id: u32,
    c_ood: u32,
    den: &Denoiser,
    sched: &NoiseSchedule,
    cfg: &SonaConfig,
    kind: GuidanceKind,
    rng: &mut SeededRng,
) -> Result<(Tensor, OutlierRecord)> {
    if c_id == c_ood {
        return Err(Error::invalid(format!(
            "source and target conditions must differ, both are {c_id}"
        )));
    }
    let seed = rng.seed();
    let noise_at = |z: &Tensor, t: usize| -> Result<Tensor> {
        match kind {
            GuidanceKind::Global => {
                let eps_u = den.predict_one(z, t, None)?;
                let p = psi(den, z, t, c_ood)?;
                Ok(eps_u.zip(&p, |u, d| (u as f64 + cfg.s * d as f64) as f32))
            }
            GuidanceKind::GlobalDiff => {
                let eps_u = den.predict_one(z, t, None)?;
                let p_ood = psi(den, z, t, c_ood)?;
                let p_id = psi(den, z, t, c_id)?;
                let mut out = eps_u;
                for i in 0..out.len() {
                    let d = p_ood.data()[i] as f64 - p_id.data()[i] as f64;
                    let v = out.data()[i] as f64 + cfg.s * d;
                    out.data_mut()[i] = v as f32;
                }
                Ok(out)
            }
            GuidanceKind::Sona => sona_noise(den, z, t, c_id, c_ood, cfg),
        }
    };
    let (img, tilde_t) = run_guided(x, sched.t_max(), sched, cfg.tilde_t, rng, noise_at)?;
    Ok((
        img,
        OutlierRecord {
            tilde_t,
            c_ood,
            seed,
        },
    ))
}

// ── Outlier sets ────────────────────────────────────────────────────────

/// A request to turn one source image into an outlier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutlierRequest {
    /// Index of the source image in the originating training split.
    pub source_index: usize,
    pub c_id: u32,
    pub c_ood: u32,
}

/// Generated outliers plus the provenance needed to pair each one with its
/// source sample during detector training.
#[derive(Debug, Clone)]
pub struct OutlierSet {
    /// `[N, C, H, W]`.
    pub images: Tensor,
    pub source_indices: Vec<usize>,
    pub ood_labels: Vec<u32>,
    pub tilde_ts: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl OutlierSet {
    pub fn len(&self) -> usize {
        self.source_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_indices.is_empty()
    }

    pub fn image(&self, i: usize) -> Tensor {
        crate::tensor::unstack_one(&self.images, i)
    }

    pub fn to_archive(&self, extra_meta: &[(&str, String)]) -> Result<Archive> {
        let mut a = Archive::new();
        a.put_text("kind", "outlier_set")?;
        for (k, v) in extra_meta {
            a.put_text(k, v.clone())?;
        }
        a.put_tensor("images", self.images.clone())?;
        let n = self.len();
        a.put_tensor(
            "source_indices",
            Tensor::new([n], self.source_indices.iter().map(|&i| i as f32).collect()),
        )?;
        a.put_tensor(
            "ood_labels",
            Tensor::new([n], self.ood_labels.iter().map(|&l| l as f32).collect()),
        )?;
        a.put_tensor(
            "tilde_ts",
            Tensor::new([n], self.tilde_ts.iter().map(|&t| t as f32).collect()),
        )?;
        // Seeds are 64-bit; stored as decimal text to stay exact.
        a.put_text(
            "seeds",
            self.seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        )?;
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<OutlierSet> {
        if a.text("kind")? != "outlier_set" {
            return Err(Error::config(format!(
                "archive kind `{}` is not an outlier set",
                a.text("kind")?
            )));
        }
        let images = a.tensor("images")?.clone();
        let n = images.shape()[0];
        let to_usize = |t: &Tensor| -> Vec<usize> { t.data().iter().map(|&v| v as usize).collect() };
        let source_indices = to_usize(a.tensor("source_indices")?);
        let ood_labels: Vec<u32> = a
            .tensor("ood_labels")?
            .data()
            .iter()
            .map(|&v| v as u32)
            .collect();
        let tilde_ts = to_usize(a.tensor("tilde_ts")?);
        let seeds = a
            .text("seeds")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<u64>()
                    .map_err(|_| Error::config(format!("bad seed entry `{s}`")))
            })
            .collect::<Result<Vec<u64>>>()?;
        let set = OutlierSet {
            images,
            source_indices,
            ood_labels,
            tilde_ts,
            seeds,
        };
        if set.source_indices.len() != n
            || set.ood_labels.len() != n
            || set.tilde_ts.len() != n
            || set.seeds.len() != n
        {
            return Err(Error::config(
                "outlier set provenance lengths disagree with image count",
            ));
        }
        Ok(set)
    }
}

/// Generate a full outlier set. Every sample runs on its own derived rng
/// stream, so the result is independent of request order and deterministic
/// given `cfg.seed`.
pub fn generate_outlier_set(
    den: &Denoiser,
    sched: &NoiseSchedule,
    source_images: &[Tensor],
    requests: &[OutlierRequest],
    cfg: &SonaConfig,
    kind: GuidanceKind,
) -> Result<OutlierSet> {
    cfg.validate(sched.t_max())?;
    let base = SeededRng::new(cfg.seed);
    let mut images = Vec::with_capacity(requests.len());
    let mut records = Vec::with_capacity(requests.len());
    for (i, req) in requests.iter().enumerate() {
        let x = source_images.get(req.source_index).ok_or_else(|| {
            Error::invalid(format!(
                "source index {} out of range ({} images)",
                req.source_index,
                source_images.len()
            ))
        })?;
        let mut rng = base.derive(i as u64);
        let (img, rec) = match kind {
            GuidanceKind::Sona => {
                generate_outlier(x, req.c_id, req.c_ood, den, sched, cfg, &mut rng)?
            }
            other => {
                generate_outlier_global(x, req.c_id, req.c_ood, den, sched, cfg, other, &mut rng)?
            }
        };
        images.push(img);
        records.push(rec);
    }
    let refs: Vec<&Tensor> = images.iter().collect();
    Ok(OutlierSet {
        images: if refs.is_empty() {
            Tensor::zeros([0, 1, 1, 1])
        } else {
            stack(&refs)
        },
        source_indices: requests.iter().map(|r| r.source_index).collect(),
        ood_labels: records.iter().map(|r| r.c_ood).collect(),
        tilde_ts: records.iter().map(|r| r.tilde_t).collect(),
        seeds: records.iter().map(|r| r.seed).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::{DenoiserConfig, Vocabulary};

    fn tiny_denoiser(seed: u64) -> Denoiser {
        let cfg = DenoiserConfig {
            in_channels: 2,
            base_channels: 4,
            levels: 1,
            cond_dim: 8,
            groups: 2,
        };
        let mut rng = SeededRng::new(seed);
        Denoiser::init(cfg, Vocabulary::new(vec![3, 9]).unwrap(), &mut rng).unwrap()
    }

    #[test]
    fn top_fraction_mask_matches_sort_oracle() {
        let a = Tensor::new([10], vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0, 5.0, 3.0]);
        let m = top_fraction_mask(&a, 0.2).unwrap();
        let expected = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(m.data(), &expected, "must select values 9 (idx 5) and 6 (idx 7)");
    }

    #[test]
    fn top_fraction_mask_tie_break_and_empty() {
        let a = Tensor::full([10], 2.5);
        let m = top_fraction_mask(&a, 0.3).unwrap();
        assert_eq!(m.data(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let empty = top_fraction_mask(&a, 0.0).unwrap();
        assert_eq!(empty.data().iter().sum::<f32>(), 0.0);
        assert!(top_fraction_mask(&a, 0.6).is_err());
        assert!(top_fraction_mask(&a, -0.1).is_err());
    }

    #[test]
    fn get_masks_selects_extremes_and_stays_disjoint() {
        // Ten distinct magnitudes: top-2 and bottom-2 are unambiguous.
        let psi_id = Tensor::new([10], vec![-0.9, 0.1, 0.5, -0.05, 0.3, 1.2, -0.2, 0.7, -0.4, 0.25]);
        let psi_ood = Tensor::new([10], vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, -3.0]);
        let m = get_masks(&psi_id, &psi_ood, 0.2).unwrap();
        // |psi_id| sorted desc: 1.2 (5), 0.9 (0) -> semantic; asc: 0.05 (3), 0.1 (1) -> nuisance.
        assert_eq!(m.m_s_id.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.m_n_id.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.m_s_ood.data(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn get_masks_identical_inputs_give_identical_semantic_masks() {
        let p = Tensor::new([8], vec![0.3, -1.0, 0.2, 0.9, -0.1, 0.05, 0.4, -0.6]);
        let m = get_masks(&p, &p, 0.25).unwrap();
        assert_eq!(m.m_s_id.data(), m.m_s_ood.data());
    }

    #[test]
    fn get_masks_disjoint_even_under_global_ties() {
        // All-equal input: both selections tie everywhere; disjointness must
        // still hold with exact cardinalities.
        let p = Tensor::full([10], 1.0);
        let m = get_masks(&p, &p, 0.3).unwrap();
        let s: f32 = m.m_s_id.data().iter().sum();
        let n: f32 = m.m_n_id.data().iter().sum();
        assert_eq!((s, n), (3.0, 3.0));
        let overlap: f32 = m
            .m_s_id
            .data()
            .iter()
            .zip(m.m_n_id.data())
            .map(|(a, b)| a * b)
            .sum();
        assert_eq!(overlap, 0.0);
    }

    #[test]
    fn delta_terms_match_elementwise_oracles() {
        let psi = Tensor::new([4], vec![0.5, -1.0, 2.0, -0.25]);
        let full = Tensor::full([4], 1.0);
        let empty = Tensor::zeros([4]);
        assert_eq!(delta_id(&full, &psi).unwrap().data(), &[-0.5, 1.0, -2.0, 0.25]);
        assert_eq!(delta_id(&empty, &psi).unwrap().max_abs(), 0.0);
        assert_eq!(delta_n(&full, &psi).unwrap().data(), psi.data());
        assert_eq!(delta_n(&empty, &psi).unwrap().max_abs(), 0.0);

        // Overlap filter: enumerate all four positions.
        let m_s_ood = Tensor::new([4], vec![1.0, 1.0, 0.0, 1.0]);
        let m_n_id = Tensor::new([4], vec![0.0, 1.0, 1.0, 0.0]);
        let d = delta_ood(&m_s_ood, &m_n_id, &psi).unwrap();
        assert_eq!(d.data(), &[0.5, 0.0, 0.0, -0.25]);
        assert_eq!(delta_ood(&full, &full, &psi).unwrap().max_abs(), 0.0);
        assert_eq!(delta_ood(&full, &empty, &psi).unwrap().data(), psi.data());
        assert!(delta_id(&Tensor::zeros([3]), &psi).is_err());
    }

    #[test]
    fn delta_supports_are_disjoint_for_computed_masks() {
        let mut rng = SeededRng::new(3);
        for _ in 0..20 {
            let psi_id = rng.normal_tensor([40]);
            let psi_ood = rng.normal_tensor([40]);
            let m = get_masks(&psi_id, &psi_ood, 0.2).unwrap();
            let d_id = delta_id(&m.m_s_id, &psi_id).unwrap();
            let d_n = delta_n(&m.m_n_id, &psi_id).unwrap();
            let d_ood = delta_ood(&m.m_s_ood, &m.m_n_id, &psi_ood).unwrap();
            for i in 0..40 {
                assert!(
                    !(d_id.data()[i] != 0.0 && d_n.data()[i] != 0.0),
                    "removal and preservation overlap at {i}"
                );
                assert!(
                    !(d_ood.data()[i] != 0.0 && d_n.data()[i] != 0.0),
                    "injection and preservation overlap at {i}"
                );
            }
        }
    }

    #[test]
    fn sona_noise_recomposes_bit_exactly_from_public_pieces() {
        let den = tiny_denoiser(5);
        let mut rng = SeededRng::new(6);
        let z = rng.normal_tensor([2, 4, 4]);
        let t = 7;
        let cfg = SonaConfig {
            s: 10.0,
            lambda: 0.2,
            ..SonaConfig::default()
        };
        let out = sona_noise(&den, &z, t, 3, 9, &cfg).unwrap();

        let eps_u = den.predict_one(&z, t, None).unwrap();
        let psi_id = psi(&den, &z, t, 3).unwrap();
        let psi_ood = psi(&den, &z, t, 9).unwrap();
        let m = get_masks(&psi_id, &psi_ood, cfg.lambda).unwrap();
        let d1 = delta_id(&m.m_s_id, &psi_id).unwrap();
        let d2 = delta_n(&m.m_n_id, &psi_id).unwrap();
        let d3 = delta_ood(&m.m_s_ood, &m.m_n_id, &psi_ood).unwrap();
        let oracle: Vec<f32> = (0..eps_u.len())
            .map(|i| {
                let sum = (d1.data()[i] + d2.data()[i]) + d3.data()[i];
                (eps_u.data()[i] as f64 + cfg.s * sum as f64) as f32
            })
            .collect();
        assert_eq!(out.data(), &oracle[..], "recomposition must be bit-exact");
    }

    #[test]
    fn sona_noise_degenerates_to_unconditional() {
        let den = tiny_denoiser(8);
        let mut rng = SeededRng::new(9);
        let z = rng.normal_tensor([2, 4, 4]);
        let eps_u = den.predict_one(&z, 5, None).unwrap();
        for cfg in [
            SonaConfig { s: 0.0, lambda: 0.2, ..SonaConfig::default() },
            SonaConfig { s: 10.0, lambda: 0.0, ..SonaConfig::default() },
        ] {
            let out = sona_noise(&den, &z, 5, 3, 9, &cfg).unwrap();
            assert_eq!(out.data(), eps_u.data(), "cfg {cfg:?} must collapse");
        }
        assert!(sona_noise(&den, &z, 5, 3, 3, &SonaConfig::default()).is_err());
    }

    #[test]
    fn tilde_t_zero_returns_input_exactly() {
        let den = tiny_denoiser(10);
        let sched = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let mut rng = SeededRng::new(11);
        let x = rng.uniform_tensor([2, 4, 4], 0.0, 1.0);
        let cfg = SonaConfig {
            tilde_t: TildeTPolicy::Fixed(0),
            ..SonaConfig::default()
        };
        let (out, rec) = generate_outlier(&x, 3, 9, &den, &sched, &cfg, &mut rng).unwrap();
        assert_eq!(out.data(), x.data());
        assert_eq!(rec.tilde_t, 0);
    }

    #[test]
    fn generation_is_deterministic_and_finite() {
        let den = tiny_denoiser(12);
        let sched = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let mut rng_x = SeededRng::new(13);
        let x = rng_x.uniform_tensor([2, 4, 4], 0.0, 1.0);
        let cfg = SonaConfig {
            s: 5.0,
            lambda: 0.2,
            tilde_t: TildeTPolicy::Uniform,
            seed: 0,
        };
        let run = |seed: u64| {
            let mut rng = SeededRng::new(seed);
            generate_outlier(&x, 3, 9, &den, &sched, &cfg, &mut rng).unwrap()
        };
        let (a, ra) = run(20);
        let (b, rb) = run(20);
        assert_eq!(a.data(), b.data());
        assert_eq!(ra, rb);
        assert!(a.all_finite());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let (c, _) = run(21);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn lambda_zero_trajectory_equals_unconditional_resampling() {
        // With λ=0 (or s=0) the guided trajectory must match a plain
        // unconditional ancestral trajectory from the same partial noising,
        // step by step, under a shared rng stream.
        let den = tiny_denoiser(14);
        let sched = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let mut rng_x = SeededRng::new(15);
        let x = rng_x.uniform_tensor([2, 4, 4], 0.0, 1.0);
        for cfg in [
            SonaConfig { s: 10.0, lambda: 0.0, tilde_t: TildeTPolicy::Fixed(6), seed: 0 },
            SonaConfig { s: 0.0, lambda: 0.2, tilde_t: TildeTPolicy::Fixed(6), seed: 0 },
        ] {
            let mut rng = SeededRng::new(30);
            let (guided, _) = generate_outlier(&x, 3, 9, &den, &sched, &cfg, &mut rng).unwrap();

            let mut rng_ref = SeededRng::new(30);
            let eps = rng_ref.normal_tensor(x.shape().to_vec());
            let mut z = add_noise(&x, 6, &eps, &sched).unwrap();
            for t in (1..=6).rev() {
                let eps_hat = den.predict_one(&z, t, None).unwrap();
                z = ddpm_step(&z, t, &eps_hat, &sched, &mut rng_ref).unwrap();
            }
            let reference = z.map(|v| v.clamp(0.0, 1.0));
            assert_eq!(guided.data(), reference.data(), "collapse failed for {cfg:?}");
        }
    }

    #[test]
    fn global_guidance_variants_run_and_s0_matches_unconditional_resampling() {
        let den = tiny_denoiser(16);
        let sched = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let mut rng_x = SeededRng::new(17);
        let x = rng_x.uniform_tensor([2, 4, 4], 0.0, 1.0);
        let cfg = SonaConfig {
            s: 0.0,
            lambda: 0.2,
            tilde_t: TildeTPolicy::Fixed(5),
            seed: 0,
        };
        let mut rng = SeededRng::new(40);
        let (global, _) =
            generate_outlier_global(&x, 3, 9, &den, &sched, &cfg, GuidanceKind::Global, &mut rng)
                .unwrap();
        let mut rng_ref = SeededRng::new(40);
        let eps = rng_ref.normal_tensor(x.shape().to_vec());
        let mut z = add_noise(&x, 5, &eps, &sched).unwrap();
        for t in (1..=5).rev() {
            let eps_hat = den.predict_one(&z, t, None).unwrap();
            z = ddpm_step(&z, t, &eps_hat, &sched, &mut rng_ref).unwrap();
        }
        let reference = z.map(|v| v.clamp(0.0, 1.0));
        assert_eq!(global.data(), reference.data());

        let cfg2 = SonaConfig { s: 4.0, ..cfg };
        let mut rng2 = SeededRng::new(41);
        let (diff_variant, rec) = generate_outlier_global(
            &x,
            3,
            9,
            &den,
            &sched,
            &cfg2,
            GuidanceKind::GlobalDiff,
            &mut rng2,
        )
        .unwrap();
        assert!(diff_variant.all_finite());
        assert_eq!(rec.tilde_t, 5);
    }

    #[test]
    fn outlier_set_round_trips_with_provenance() {
        let den = tiny_denoiser(18);
        let sched = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let mut rng = SeededRng::new(19);
        let sources: Vec<Tensor> = (0..3).map(|_| rng.uniform_tensor([2, 4, 4], 0.0, 1.0)).collect();
        let requests = vec![
            OutlierRequest { source_index: 2, c_id: 3, c_ood: 9 },
            OutlierRequest { source_index: 0, c_id: 9, c_ood: 3 },
        ];
        let cfg = SonaConfig { seed: 77, ..SonaConfig::default() };
        let set =
            generate_outlier_set(&den, &sched, &sources, &requests, &cfg, GuidanceKind::Sona)
                .unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.source_indices, vec![2, 0]);
        assert_eq!(set.ood_labels, vec![9, 3]);
        assert!(set.tilde_ts.iter().all(|&t| (1..=10).contains(&t)));

        let bytes = set.to_archive(&[("config_hash", "abc".into())]).unwrap().to_bytes();
        let loaded = OutlierSet::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(loaded.images.data(), set.images.data());
        assert_eq!(loaded.source_indices, set.source_indices);
        assert_eq!(loaded.ood_labels, set.ood_labels);
        assert_eq!(loaded.tilde_ts, set.tilde_ts);
        assert_eq!(loaded.seeds, set.seeds);

        // Same config regenerates byte-identical outliers.
        let set2 =
            generate_outlier_set(&den, &sched, &sources, &requests, &cfg, GuidanceKind::Sona)
                .unwrap();
        assert_eq!(set2.images.data(), set.images.data());

        let bad = vec![OutlierRequest { source_index: 5, c_id: 3, c_ood: 9 }];
        assert!(
            generate_outlier_set(&den, &sched, &sources, &bad, &cfg, GuidanceKind::Sona).is_err()
        );
    }

    #[test]
    fn out_of_range_pixels_are_rejected() {
        let den = tiny_denoiser(20);
        let sched = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let mut rng = SeededRng::new(21);
        let x = Tensor::new([2, 2, 2], vec![0.5, 1.5, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]);
        let err = generate_outlier(&x, 3, 9, &den, &sched, &SonaConfig::default(), &mut rng);
        assert!(err.is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn mask_cardinality_is_exact(
                values in proptest::collection::vec(-1e3f32..1e3, 1..200),
                lambda in 0.0f64..=0.5,
            ) {
                let n = values.len();
                let t = Tensor::new([n], values);
                let m = top_fraction_mask(&t, lambda).unwrap();
                let k = (lambda * n as f64).ceil() as usize;
                let ones = m.data().iter().filter(|&&v| v == 1.0).count();
                let zeros = m.data().iter().filter(|&&v| v == 0.0).count();
                prop_assert_eq!(ones, k);
                prop_assert_eq!(ones + zeros, n);
            }

            #[test]
            fn masks_are_disjoint_with_exact_counts(
                values_id in proptest::collection::vec(-10f32..10.0, 2..120),
                values_ood_seed in any::<u64>(),
                lambda_pct in 0u32..=50,
            ) {
                let n = values_id.len();
                let lambda = lambda_pct as f64 / 100.0;
                let k = (lambda * n as f64).ceil() as usize;
                prop_assume!(2 * k <= n);
                let psi_id = Tensor::new([n], values_id);
                let mut rng = SeededRng::new(values_ood_seed);
                let psi_ood = rng.normal_tensor([n]);
                let m = get_masks(&psi_id, &psi_ood, lambda).unwrap();
                for mask in [&m.m_s_id, &m.m_n_id, &m.m_s_ood] {
                    let ones = mask.data().iter().filter(|&&v| v == 1.0).count();
                    prop_assert_eq!(ones, k);
                }
                let overlap: f32 = m.m_s_id.data().iter().zip(m.m_n_id.data()).map(|(a, b)| a * b).sum();
                prop_assert_eq!(overlap, 0.0);
            }

            #[test]
            fn semantic_mask_selects_a_magnitude_threshold(
                values in proptest::collection::vec(-5f32..5.0, 4..80),
            ) {
                // Every selected magnitude must be >= every unselected one.
                let n = values.len();
                let t = Tensor::new([n], values);
                let abs = t.map(f32::abs);
                let m = top_fraction_mask(&abs, 0.25).unwrap();
                let mut min_in = f32::INFINITY;
                let mut max_out = f32::NEG_INFINITY;
                for i in 0..n {
                    if m.data()[i] == 1.0 {
                        min_in = min_in.min(abs.data()[i]);
                    } else {
                        max_out = max_out.max(abs.data()[i]);
                    }
                }
                prop_assert!(min_in >= max_out);
            }
        }
    }
}
