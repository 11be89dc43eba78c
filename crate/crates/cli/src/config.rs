//! Pipeline configuration: a strict TOML schema covering every stage,
//! plus the content hashes that stamp artifacts and guard against mixing
//! outputs of different configurations.
//!
//! Two kinds of digest are derived from a config:
//!   * the **config hash** — a digest of the whole canonicalized file
//!     (with the effective seed folded in), recorded in reports;
//!   * per-stage **lineage hashes** — chained digests over exactly the
//!     sections that influence one artifact, so downstream stages can
//!     verify their inputs while sweeps may legitimately reuse upstream
//!     artifacts whose producing sections are unchanged.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sona_core::data::{FactorSpec, ShapeClass, SplitCounts};
use sona_core::detector::DetectorTrainConfig;
use sona_core::diffusion::{DenoiserConfig, DiffusionTrainConfig, NoiseSchedule};
use sona_core::guidance::{GuidanceKind, SonaConfig, TildeTPolicy};
use sona_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub side: usize,
    pub id_train: usize,
    pub id_test: usize,
    pub near_ood_test: usize,
    pub far_ood_test: usize,
    pub prompt_train: usize,
    pub jitter: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    pub id_classes: Vec<String>,
    pub near_ood_classes: Vec<String>,
    pub far_ood_classes: Vec<String>,
    pub ood_prompt_classes: Vec<String>,
}

impl Default for DataSection {
    fn default() -> DataSection {
        let spec = FactorSpec::default();
        let counts = SplitCounts::default();
        let names = |cs: &[ShapeClass]| cs.iter().map(|c| c.name().to_string()).collect();
        DataSection {
            side: spec.side,
            id_train: counts.id_train,
            id_test: counts.id_test,
            near_ood_test: counts.near_ood_test,
            far_ood_test: counts.far_ood_test,
            prompt_train: counts.prompt_train,
            jitter: 0.08,
            radius_min: 0.26,
            radius_max: 0.36,
            id_classes: names(&spec.id_classes),
            near_ood_classes: names(&spec.near_ood_classes),
            far_ood_classes: names(&spec.far_ood_classes),
            ood_prompt_classes: names(&spec.ood_prompt_classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub base_channels: usize,
    pub levels: usize,
    pub cond_dim: usize,
    pub groups: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub p_uncond: f64,
}

impl Default for DiffusionSection {
    fn default() -> DiffusionSection {
        let den = DenoiserConfig::default();
        let train = DiffusionTrainConfig::default();
        DiffusionSection {
            t_max: sona_core::diffusion::DEFAULT_T,
            beta_start: sona_core::diffusion::DEFAULT_BETA_START,
            beta_end: sona_core::diffusion::DEFAULT_BETA_END,
            base_channels: den.base_channels,
            levels: den.levels,
            cond_dim: den.cond_dim,
            groups: den.groups,
            steps: train.steps,
            batch_size: train.batch_size,
            lr: 0.002,
            p_uncond: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutlierSection {
    /// Guidance scale.
    pub s: f64,
    /// Mask fraction.
    pub lambda: f64,
    /// Early-stop noising policy: `"uniform"` or `"fixed:<t>"`.
    pub tilde_t: String,
    /// Outliers to generate; 0 means one per ID-training image.
    pub count: usize,
    /// How the target condition is chosen per outlier:
    /// `"rand"` (uniform over prompt classes), `"close"`, or `"far"`
    /// (by shape-overlap distance to the source class).
    pub prompt_policy: String,
}

impl Default for OutlierSection {
    fn default() -> OutlierSection {
        let cfg = SonaConfig::default();
        OutlierSection {
            s: cfg.s,
            lambda: cfg.lambda,
            tilde_t: "uniform".into(),
            count: 0,
            prompt_policy: "rand".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub q_lr: f64,
    pub beta: f64,
    pub gamma_mi: f64,
}

impl Default for DetectorSection {
    fn default() -> DetectorSection {
        let cfg = DetectorTrainConfig::default();
        DetectorSection {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: 0.001,
            q_lr: 0.001,
            beta: cfg.beta,
            gamma_mi: cfg.gamma_mi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Epochs for the independent probe classifier behind the
    /// semantic-shift metric.
    pub probe_epochs: usize,
    /// Emit the qualitative source/outlier PNG grid.
    pub grid: bool,
}

impl Default for EvalSection {
    fn default() -> EvalSection {
        EvalSection {
            probe_epochs: 6,
            grid: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataSection,
    pub diffusion: DiffusionSection,
    pub outliers: OutlierSection,
    pub detector: DetectorSection,
    pub eval: EvalSection,
}

/// Policy for picking the target condition of each outlier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptPolicy {
    Rand,
    Close,
    Far,
}

impl PromptPolicy {
    pub fn from_name(name: &str) -> Result<PromptPolicy> {
        match name {
            "rand" => Ok(PromptPolicy::Rand),
            "close" => Ok(PromptPolicy::Close),
            "far" => Ok(PromptPolicy::Far),
            other => Err(Error::config(format!(
                "unknown prompt policy `{other}` (expected rand, close, or far)"
            ))),
        }
    }
}

/// Parse `"uniform"` or `"fixed:<t>"`.
pub fn parse_tilde_t(text: &str) -> Result<TildeTPolicy> {
    if text == "uniform" {
        return Ok(TildeTPolicy::Uniform);
    }
    if let Some(num) = text.strip_prefix("fixed:") {
        let t: usize = num.parse().map_err(|_| {
            Error::config(format!("bad fixed noising step `{num}` in `{text}`"))
        })?;
        return Ok(TildeTPolicy::Fixed(t));
    }
    Err(Error::config(format!(
        "bad noising policy `{text}` (expected `uniform` or `fixed:<t>`)"
    )))
}

pub fn tilde_t_name(policy: TildeTPolicy) -> String {
    match policy {
        TildeTPolicy::Uniform => "uniform".into(),
        TildeTPolicy::Fixed(t) => format!("fixed:{t}"),
    }
}

fn parse_classes(names: &[String], field: &str) -> Result<Vec<ShapeClass>> {
    if names.is_empty() {
        return Err(Error::config(format!("{field} must not be empty")));
    }
    names
        .iter()
        .map(|n| {
            ShapeClass::from_name(n)
                .map_err(|_| Error::config(format!("unknown shape class `{n}` in {field}")))
        })
        .collect()
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<PipelineConfig> {
        let cfg: PipelineConfig = toml::from_str(text)
            .map_err(|e| Error::config(format!("bad config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config `{}`: {e}", path.display()))
        })?;
        PipelineConfig::from_toml(&text)
    }

    /// Canonical serialization: field order is fixed by the struct, so two
    /// files that parse to the same configuration serialize identically.
    pub fn to_canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        self.factor_spec()?;
        self.sona_config(parse_tilde_t(&self.outliers.tilde_t)?)
            .validate(self.diffusion.t_max)?;
        PromptPolicy::from_name(&self.outliers.prompt_policy)?;
        self.denoiser_config().validate_against(self.data.side)?;
        self.schedule()?;
        self.detector_train(0).validate()?;
        if self.eval.probe_epochs == 0 {
            return Err(Error::config("probe_epochs must be positive"));
        }
        Ok(())
    }

    // ── Conversions into core types ─────────────────────────────────────

    pub fn factor_spec(&self) -> Result<FactorSpec> {
        let spec = FactorSpec {
            side: self.data.side,
            id_classes: parse_classes(&self.data.id_classes, "id_classes")?,
            near_ood_classes: parse_classes(&self.data.near_ood_classes, "near_ood_classes")?,
            far_ood_classes: parse_classes(&self.data.far_ood_classes, "far_ood_classes")?,
            ood_prompt_classes: parse_classes(&self.data.ood_prompt_classes, "ood_prompt_classes")?,
            jitter: self.data.jitter as f32,
            radius_range: (self.data.radius_min as f32, self.data.radius_max as f32),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn split_counts(&self) -> SplitCounts {
        SplitCounts {
            id_train: self.data.id_train,
            id_test: self.data.id_test,
            near_ood_test: self.data.near_ood_test,
            far_ood_test: self.data.far_ood_test,
            prompt_train: self.data.prompt_train,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 3,
            base_channels: self.diffusion.base_channels,
            levels: self.diffusion.levels,
            cond_dim: self.diffusion.cond_dim,
            groups: self.diffusion.groups,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(
            self.diffusion.t_max,
            self.diffusion.beta_start,
            self.diffusion.beta_end,
        )
    }

    pub fn diffusion_train(&self) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            steps: self.diffusion.steps,
            batch_size: self.diffusion.batch_size,
            lr: self.diffusion.lr as f32,
            p_uncond: self.diffusion.p_uncond as f32,
            seed: self.seed.wrapping_add(0x01),
        }
    }

    /// Guidance settings with an explicit noising policy (the CLI flag may
    /// override the config file's default) and a generation seed derived
    /// from `stream`, so independent outlier sets use independent draws.
    pub fn sona_config_for(&self, policy: TildeTPolicy, stream: u64) -> SonaConfig {
        SonaConfig {
            s: self.outliers.s,
            lambda: self.outliers.lambda,
            tilde_t: policy,
            seed: self
                .seed
                .wrapping_add(0x02)
                .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        }
    }

    fn sona_config(&self, policy: TildeTPolicy) -> SonaConfig {
        self.sona_config_for(policy, 0)
    }

    /// Detector training settings; `stream` varies the shuffle/init seed
    /// across multi-seed experiments.
    pub fn detector_train(&self, stream: u64) -> DetectorTrainConfig {
        DetectorTrainConfig {
            epochs: self.detector.epochs,
            batch_size: self.detector.batch_size,
            lr: self.detector.lr as f32,
            q_lr: self.detector.q_lr as f32,
            beta: self.detector.beta,
            gamma_mi: self.detector.gamma_mi,
            oe_literal: false,
            seed: self
                .seed
                .wrapping_add(0x03)
                .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        }
    }

    // ── Digests ─────────────────────────────────────────────────────────

    /// Digest of the whole canonicalized config. Stamped into report
    /// metadata.
    pub fn config_hash(&self) -> String {
        digest(&["config", &self.to_canonical_toml()])
    }

    /// Lineage hash of the dataset artifact.
    pub fn data_hash(&self) -> String {
        digest(&[
            "data",
            &self.seed.to_string(),
            &toml::to_string(&self.data).unwrap(),
        ])
    }

    /// Lineage hash of the diffusion checkpoint.
    pub fn diffusion_hash(&self) -> String {
        digest(&[
            "diffusion",
            &self.data_hash(),
            &toml::to_string(&self.diffusion).unwrap(),
        ])
    }

    /// Lineage hash of an outlier archive (guidance kind, effective
    /// noising policy, and generation stream are part of its identity).
    pub fn outliers_hash(&self, kind: GuidanceKind, policy: TildeTPolicy, stream: u64) -> String {
        digest(&[
            "outliers",
            &self.diffusion_hash(),
            &toml::to_string(&self.outliers).unwrap(),
            kind.name(),
            &tilde_t_name(policy),
            &stream.to_string(),
        ])
    }

    /// Lineage hash of a detector checkpoint. Tiers that consume outliers
    /// fold the outlier lineage in; the plain tier depends only on data.
    pub fn detector_hash(&self, tier_name: &str, outliers: Option<&str>, stream: u64) -> String {
        digest(&[
            "detector",
            &self.data_hash(),
            outliers.unwrap_or("-"),
            &toml::to_string(&self.detector).unwrap(),
            tier_name,
            &stream.to_string(),
        ])
    }

    /// Lineage hash of the probe classifier.
    pub fn probe_hash(&self) -> String {
        digest(&[
            "probe",
            &self.data_hash(),
            &self.eval.probe_epochs.to_string(),
        ])
    }
}

fn digest(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let out = h.finalize();
    let mut s = String::with_capacity(16);
    for b in &out[..8] {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Spot-check that the denoiser settings fit the image geometry before
/// any expensive work starts.
trait ValidateAgainst {
    fn validate_against(self, side: usize) -> Result<()>;
}

impl ValidateAgainst for DenoiserConfig {
    fn validate_against(self, side: usize) -> Result<()> {
        if self.levels > 0 && side % (1 << self.levels) != 0 {
            return Err(Error::config(format!(
                "image side {side} is not divisible by 2^levels = {}",
                1 << self.levels
            )));
        }
        Ok(())
    }
}
