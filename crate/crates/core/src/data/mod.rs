//! Synthetic image benchmark with ground-truth semantic/nuisance
//! factorization.
//!
//! Each image is a colored shape (the semantic factor) on a parameterized
//! background (the nuisance factor). In-distribution and near-OOD images
//! share the striped nuisance family; far-OOD images use a noise-textured
//! family. Because rendering is hard-edged, every image carries an exact
//! foreground mask, which evaluation uses to measure how well generated
//! outliers preserve backgrounds — the masks are never shown to any model.

pub mod archive;
pub mod shapes;

pub use archive::Archive;
pub use shapes::ShapeClass;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use std::f32::consts::PI;

// ── Nuisance (background) families ─────────────────────────────────────

/// Parameter ranges for the striped (in-distribution) nuisance family.
/// Near-OOD backgrounds are drawn from these same ranges; far-OOD uses
/// [`NOISE_BASE`]/[`NOISE_AMP`] instead.
pub const STRIPE_BASE: (f32, f32) = (0.25, 0.50);
pub const STRIPE_AMP: (f32, f32) = (0.08, 0.18);
pub const STRIPE_FREQ: (f32, f32) = (2.0, 5.0);
pub const NOISE_BASE: (f32, f32) = (0.25, 0.50);
pub const NOISE_AMP: (f32, f32) = (0.10, 0.30);
/// Foreground channel range; disjoint from every background value so shapes
/// always contrast with their backdrop.
pub const FOREGROUND: (f32, f32) = (0.75, 1.00);

#[derive(Debug, Clone, PartialEq)]
pub enum Background {
    /// Sinusoidal stripes: `base[c] + amp·sin(2π·freq·t + phase)` where `t`
    /// is the normalized coordinate along the stripe normal.
    Stripes {
        base: [f32; 3],
        amp: f32,
        freq: f32,
        phase: f32,
        orient: f32,
    },
    /// Per-pixel uniform noise around a base color.
    Noise { base: [f32; 3], amp: f32, seed: u64 },
}

impl Background {
    fn sample_stripes(rng: &mut SeededRng) -> Background {
        Background::Stripes {
            base: [
                rng.uniform_in(STRIPE_BASE.0, STRIPE_BASE.1),
                rng.uniform_in(STRIPE_BASE.0, STRIPE_BASE.1),
                rng.uniform_in(STRIPE_BASE.0, STRIPE_BASE.1),
            ],
            amp: rng.uniform_in(STRIPE_AMP.0, STRIPE_AMP.1),
            freq: rng.uniform_in(STRIPE_FREQ.0, STRIPE_FREQ.1),
            phase: rng.uniform_in(0.0, 2.0 * PI),
            orient: rng.uniform_in(0.0, PI),
        }
    }

    fn sample_noise(rng: &mut SeededRng) -> Background {
        Background::Noise {
            base: [
                rng.uniform_in(NOISE_BASE.0, NOISE_BASE.1),
                rng.uniform_in(NOISE_BASE.0, NOISE_BASE.1),
                rng.uniform_in(NOISE_BASE.0, NOISE_BASE.1),
            ],
            amp: rng.uniform_in(NOISE_AMP.0, NOISE_AMP.1),
            seed: rng.next_u64(),
        }
    }

    /// Render the full background as a `[3, side, side]` tensor.
    fn render(&self, side: usize) -> Tensor {
        let mut t = Tensor::zeros([3, side, side]);
        match *self {
            Background::Stripes {
                base,
                amp,
                freq,
                phase,
                orient,
            } => {
                let (cos_o, sin_o) = (orient.cos(), orient.sin());
                for y in 0..side {
                    for x in 0..side {
                        let u = (x as f32 + 0.5) / side as f32;
                        let v = (y as f32 + 0.5) / side as f32;
                        let along = u * cos_o + v * sin_o;
                        let wave = amp * (2.0 * PI * freq * along + phase).sin();
                        for c in 0..3 {
                            t.data_mut()[(c * side + y) * side + x] =
                                (base[c] + wave).clamp(0.0, 1.0);
                        }
                    }
                }
            }
            Background::Noise { base, amp, seed } => {
                let mut rng = SeededRng::new(seed);
                for y in 0..side {
                    for x in 0..side {
                        for c in 0..3 {
                            let n = rng.uniform_in(-amp, amp);
                            t.data_mut()[(c * side + y) * side + x] =
                                (base[c] + n).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        t
    }
}

// ── Dataset types ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LabeledImage {
    /// `[3, side, side]`, values in `[0, 1]`.
    pub pixels: Tensor,
    /// Global shape-class id (see [`ShapeClass::id`]).
    pub label: u32,
    /// `[side, side]` binary mask marking exactly the rendered shape
    /// support. Held out from all training; evaluation-only.
    pub gt_foreground_mask: Tensor,
    /// Nuisance parameters this image was rendered with (in-memory
    /// provenance for tests; not serialized).
    pub background: Background,
}

/// Declares which shape classes play which role. Roles must be pairwise
/// disjoint: prompt classes feed the diffusion model's condition vocabulary,
/// near/far classes are reserved for detector evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSpec {
    pub side: usize,
    pub id_classes: Vec<ShapeClass>,
    pub near_ood_classes: Vec<ShapeClass>,
    pub far_ood_classes: Vec<ShapeClass>,
    pub ood_prompt_classes: Vec<ShapeClass>,
    /// Shape-center jitter as a fraction of the side length.
    pub jitter: f32,
    /// Shape half-size range as a fraction of the side length.
    pub radius_range: (f32, f32),
}

impl Default for FactorSpec {
    fn default() -> FactorSpec {
        FactorSpec {
            side: 32,
            id_classes: vec![
                ShapeClass::Circle,
                ShapeClass::Square,
                ShapeClass::Triangle,
                ShapeClass::Plus,
            ],
            near_ood_classes: vec![ShapeClass::Ring, ShapeClass::Cross],
            far_ood_classes: vec![ShapeClass::Star, ShapeClass::Diamond],
            ood_prompt_classes: vec![ShapeClass::Crescent, ShapeClass::Tee],
            jitter: 0.08,
            radius_range: (0.26, 0.36),
        }
    }
}

impl FactorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 8 {
            return Err(Error::config(format!(
                "image side must be at least 8, got {}",
                self.side
            )));
        }
        if self.id_classes.len() < 2 {
            return Err(Error::config(
                "need at least 2 in-distribution classes for classification",
            ));
        }
        for (name, list) in [
            ("near_ood_classes", &self.near_ood_classes),
            ("far_ood_classes", &self.far_ood_classes),
            ("ood_prompt_classes", &self.ood_prompt_classes),
        ] {
            if list.is_empty() {
                return Err(Error::config(format!(
                    "insufficient class budget: {name} is empty"
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for &c in self
            .id_classes
            .iter()
            .chain(&self.near_ood_classes)
            .chain(&self.far_ood_classes)
            .chain(&self.ood_prompt_classes)
        {
            if !seen.insert(c) {
                return Err(Error::config(format!(
                    "shape class `{}` assigned to more than one role",
                    c.name()
                )));
            }
        }
        if !(self.jitter >= 0.0 && self.jitter < 0.25) {
            return Err(Error::config(format!(
                "jitter must be in [0, 0.25), got {}",
                self.jitter
            )));
        }
        let (r0, r1) = self.radius_range;
        if !(r0 > 0.0 && r0 <= r1 && r1 + self.jitter < 0.5) {
            return Err(Error::config(format!(
                "radius range ({r0}, {r1}) plus jitter {} must keep shapes inside the frame",
                self.jitter
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub id_train: usize,
    pub id_test: usize,
    pub near_ood_test: usize,
    pub far_ood_test: usize,
    /// Images of the OOD-prompt classes used ONLY to train the diffusion
    /// model's condition embeddings. Never seen by the detector.
    pub prompt_train: usize,
}

impl Default for SplitCounts {
    fn default() -> SplitCounts {
        SplitCounts {
            id_train: 2048,
            id_test: 512,
            near_ood_test: 512,
            far_ood_test: 512,
            prompt_train: 1024,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkSplits {
    pub id_train: Vec<LabeledImage>,
    pub id_test: Vec<LabeledImage>,
    pub near_ood_test: Vec<LabeledImage>,
    pub far_ood_test: Vec<LabeledImage>,
    pub prompt_train: Vec<LabeledImage>,
    pub id_classes: Vec<ShapeClass>,
    pub ood_prompt_labels: Vec<ShapeClass>,
    pub side: usize,
}

impl BenchmarkSplits {
    /// Map a global shape-class label to the detector's class index in
    /// `[0, C)`, or an error if the label is not an ID class.
    pub fn id_class_index(&self, label: u32) -> Result<usize> {
        let class = ShapeClass::from_id(label)?;
        self.id_classes
            .iter()
            .position(|&c| c == class)
            .ok_or_else(|| {
                Error::invalid(format!("label `{}` is not an ID class", class.name()))
            })
    }

    pub fn num_id_classes(&self) -> usize {
        self.id_classes.len()
    }

    fn split(&self, name: &str) -> Result<&Vec<LabeledImage>> {
        match name {
            "id_train" => Ok(&self.id_train),
            "id_test" => Ok(&self.id_test),
            "near_ood_test" => Ok(&self.near_ood_test),
            "far_ood_test" => Ok(&self.far_ood_test),
            "prompt_train" => Ok(&self.prompt_train),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }

    pub const SPLIT_NAMES: [&'static str; 5] = [
        "id_train",
        "id_test",
        "near_ood_test",
        "far_ood_test",
        "prompt_train",
    ];

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.put_text("side", self.side.to_string())?;
        a.put_text(
            "id_classes",
            self.id_classes
                .iter()
                .map(|c| c.name())
                .collect::<Vec<_>>()
                .join(","),
        )?;
        a.put_text(
            "ood_prompt_labels",
            self.ood_prompt_labels
                .iter()
                .map(|c| c.name())
                .collect::<Vec<_>>()
                .join(","),
        )?;
        for name in Self::SPLIT_NAMES {
            let images = self.split(name)?;
            let n = images.len();
            let side = self.side;
            let mut pix = Vec::with_capacity(n * 3 * side * side);
            let mut masks = Vec::with_capacity(n * side * side);
            let mut labels = Vec::with_capacity(n);
            for img in images {
                pix.extend_from_slice(img.pixels.data());
                masks.extend_from_slice(img.gt_foreground_mask.data());
                labels.push(img.label as f32);
            }
            a.put_tensor(&format!("{name}.images"), Tensor::new([n, 3, side, side], pix))?;
            a.put_tensor(&format!("{name}.masks"), Tensor::new([n, side, side], masks))?;
            a.put_tensor(&format!("{name}.labels"), Tensor::new([n], labels))?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<BenchmarkSplits> {
        let side: usize = a
            .text("side")?
            .parse()
            .map_err(|_| Error::config("side metadata is not an integer"))?;
        let parse_classes = |csv: &str| -> Result<Vec<ShapeClass>> {
            csv.split(',')
                .filter(|s| !s.is_empty())
                .map(ShapeClass::from_name)
                .collect()
        };
        let id_classes = parse_classes(a.text("id_classes")?)?;
        let ood_prompt_labels = parse_classes(a.text("ood_prompt_labels")?)?;
        let load_split = |name: &str| -> Result<Vec<LabeledImage>> {
            let images = a.tensor(&format!("{name}.images"))?;
            let masks = a.tensor(&format!("{name}.masks"))?;
            let labels = a.tensor(&format!("{name}.labels"))?;
            let n = images.shape()[0];
            if images.shape() != [n, 3, side, side]
                || masks.shape() != [n, side, side]
                || labels.shape() != [n]
            {
                return Err(Error::config(format!(
                    "split `{name}` tensors have inconsistent shapes"
                )));
            }
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                out.push(LabeledImage {
                    pixels: crate::tensor::unstack_one(images, i),
                    label: labels.data()[i] as u32,
                    gt_foreground_mask: crate::tensor::unstack_one(masks, i),
                    // Background provenance is not persisted; loads carry a
                    // placeholder (tests that need it inspect fresh splits).
                    background: Background::Noise {
                        base: [0.0; 3],
                        amp: 0.0,
                        seed: 0,
                    },
                });
            }
            Ok(out)
        };
        Ok(BenchmarkSplits {
            id_train: load_split("id_train")?,
            id_test: load_split("id_test")?,
            near_ood_test: load_split("near_ood_test")?,
            far_ood_test: load_split("far_ood_test")?,
            prompt_train: load_split("prompt_train")?,
            id_classes,
            ood_prompt_labels,
            side,
        })
    }
}

// ── Rendering ───────────────────────────────────────────────────────────

/// Render one image: a shape with the given color/placement over a
/// background, plus its exact foreground mask.
pub fn render_image(
    side: usize,
    class: ShapeClass,
    background: &Background,
    fg: [f32; 3],
    center: (f32, f32),
    radius: f32,
) -> (Tensor, Tensor) {
    let mut pixels = background.render(side);
    let mut mask = Tensor::zeros([side, side]);
    for y in 0..side {
        for x in 0..side {
            let dx = (x as f32 + 0.5) - center.0;
            let dy = (y as f32 + 0.5) - center.1;
            if class.contains(dx, dy, radius) {
                mask.data_mut()[y * side + x] = 1.0;
                for c in 0..3 {
                    pixels.data_mut()[(c * side + y) * side + x] = fg[c];
                }
            }
        }
    }
    (pixels, mask)
}

fn render_random(spec: &FactorSpec, class: ShapeClass, striped: bool, rng: &mut SeededRng) -> LabeledImage {
    let side = spec.side;
    let background = if striped {
        Background::sample_stripes(rng)
    } else {
        Background::sample_noise(rng)
    };
    let fg = [
        rng.uniform_in(FOREGROUND.0, FOREGROUND.1),
        rng.uniform_in(FOREGROUND.0, FOREGROUND.1),
        rng.uniform_in(FOREGROUND.0, FOREGROUND.1),
    ];
    let half = side as f32 / 2.0;
    let center = (
        half + rng.uniform_in(-spec.jitter, spec.jitter) * side as f32,
        half + rng.uniform_in(-spec.jitter, spec.jitter) * side as f32,
    );
    let radius = rng.uniform_in(spec.radius_range.0, spec.radius_range.1) * side as f32;
    let (pixels, mask) = render_image(side, class, &background, fg, center, radius);
    LabeledImage {
        pixels,
        label: class.id(),
        gt_foreground_mask: mask,
        background,
    }
}

fn generate_split(
    spec: &FactorSpec,
    classes: &[ShapeClass],
    count: usize,
    striped: bool,
    split_rng: &SeededRng,
) -> Vec<LabeledImage> {
    let k = classes.len();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        // Round-robin class assignment keeps every split balanced within ±1.
        let class = classes[i % k];
        let mut rng = split_rng.derive(i as u64);
        out.push(render_random(spec, class, striped, &mut rng));
    }
    out
}

/// Build the full benchmark deterministically from a seed.
pub fn generate_benchmark(
    spec: &FactorSpec,
    counts: &SplitCounts,
    seed: u64,
) -> Result<BenchmarkSplits> {
    spec.validate()?;
    let root = SeededRng::new(seed);
    let splits = [
        ("id_train", &spec.id_classes, counts.id_train, true),
        ("id_test", &spec.id_classes, counts.id_test, true),
        ("near_ood_test", &spec.near_ood_classes, counts.near_ood_test, true),
        ("far_ood_test", &spec.far_ood_classes, counts.far_ood_test, false),
        ("prompt_train", &spec.ood_prompt_classes, counts.prompt_train, true),
    ];
    let mut rendered: Vec<Vec<LabeledImage>> = Vec::new();
    for (i, (_, classes, count, striped)) in splits.iter().enumerate() {
        let split_rng = root.derive(i as u64);
        rendered.push(generate_split(spec, classes, *count, *striped, &split_rng));
    }
    let mut it = rendered.into_iter();
    Ok(BenchmarkSplits {
        id_train: it.next().unwrap(),
        id_test: it.next().unwrap(),
        near_ood_test: it.next().unwrap(),
        far_ood_test: it.next().unwrap(),
        prompt_train: it.next().unwrap(),
        id_classes: spec.id_classes.clone(),
        ood_prompt_labels: spec.ood_prompt_classes.clone(),
        side: spec.side,
    })
}
