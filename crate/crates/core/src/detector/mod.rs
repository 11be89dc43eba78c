//! Out-of-distribution detector: a convolutional encoder with a
//! classification head, trained against generated outliers, plus the
//! energy score used at test time and a variational head for estimating
//! (and minimizing) the mutual information between paired in-distribution
//! and outlier features.

pub mod losses;
pub mod train;

pub use losses::{club_estimate, club_mi, club_q_nll_node, loss_ce, loss_oe, loss_oe_literal};
pub use train::{train_detector, DetectorTrainConfig, DetectorTrainStats, LossTier};

use crate::data::archive::Archive;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, GroupNorm, Linear, NodeId, ParamBlock, Scalar};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectorConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channel widths of the three stride-2 stages.
    pub widths: [usize; 3],
    /// Feature width d shared by the head and the variational head.
    pub feature_dim: usize,
    pub groups: usize,
}

impl DetectorConfig {
    pub fn new(num_classes: usize) -> DetectorConfig {
        DetectorConfig {
            in_channels: 3,
            num_classes,
            widths: [16, 32, 64],
            feature_dim: 128,
            groups: 4,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("detector needs at least 2 classes"));
        }
        for w in self.widths {
            if w == 0 || w % self.groups != 0 {
                return Err(Error::config(format!(
                    "stage width {w} must be positive and divisible by groups {}",
                    self.groups
                )));
            }
        }
        if self.feature_dim == 0 || self.in_channels == 0 {
            return Err(Error::config("dimensions must be positive"));
        }
        Ok(())
    }

    fn to_meta(&self) -> String {
        format!(
            "in_channels={},num_classes={},w0={},w1={},w2={},feature_dim={},groups={}",
            self.in_channels,
            self.num_classes,
            self.widths[0],
            self.widths[1],
            self.widths[2],
            self.feature_dim,
            self.groups
        )
    }

    fn from_meta(meta: &str) -> Result<DetectorConfig> {
        let mut cfg = DetectorConfig::new(2);
        for kv in meta.split(',') {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::config(format!("bad config field `{kv}`")))?;
            let v: usize = v
                .parse()
                .map_err(|_| Error::config(format!("bad config value `{kv}`")))?;
            match k {
                "in_channels" => cfg.in_channels = v,
                "num_classes" => cfg.num_classes = v,
                "w0" => cfg.widths[0] = v,
                "w1" => cfg.widths[1] = v,
                "w2" => cfg.widths[2] = v,
                "feature_dim" => cfg.feature_dim = v,
                "groups" => cfg.groups = v,
                other => return Err(Error::config(format!("unknown config key `{other}`"))),
            }
        }
        Ok(cfg)
    }
}

// ── Variational head ────────────────────────────────────────────────────

/// Two-layer perceptron predicting a diagonal Gaussian over outlier
/// features conditioned on in-distribution features. Owns its parameters
/// (it is optimized separately from the detector).
#[derive(Debug)]
pub struct ClubHead {
    pub params: ParamBlock,
    fc1: Linear,
    mu: Linear,
    logvar: Linear,
    pub dim: usize,
}

impl ClubHead {
    pub fn init(dim: usize, rng: &mut SeededRng) -> ClubHead {
        let mut params = ParamBlock::new();
        let fc1 = Linear::init(&mut params, "q.fc1", dim, dim, rng);
        let mu = Linear::init(&mut params, "q.mu", dim, dim, rng);
        let logvar = Linear::init(&mut params, "q.logvar", dim, dim, rng);
        ClubHead {
            params,
            fc1,
            mu,
            logvar,
            dim,
        }
    }

    /// Build `(mu, logvar)` prediction nodes. With `frozen` the weights
    /// enter the graph as constants, so gradients flow through the head
    /// into its inputs but never reach its parameters.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        frozen: bool,
    ) -> (NodeId, NodeId) {
        self.forward_in(g, &self.params, x, frozen)
    }

    /// [`ClubHead::forward`] against an external parameter store.
    pub fn forward_in<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        block: &ParamBlock,
        x: NodeId,
        frozen: bool,
    ) -> (NodeId, NodeId) {
        let node = |g: &mut Graph<T>, name: &str| {
            if frozen {
                g.input(block.value(name))
            } else {
                g.param(block, name)
            }
        };
        let w1 = node(g, &self.fc1.weight);
        let b1 = node(g, &self.fc1.bias);
        let wm = node(g, &self.mu.weight);
        let bm = node(g, &self.mu.bias);
        let wv = node(g, &self.logvar.weight);
        let bv = node(g, &self.logvar.bias);
        let h = g.matmul(x, w1);
        let h = g.add_row_vec(h, b1);
        let h = g.relu(h);
        let mu = g.matmul(h, wm);
        let mu = g.add_row_vec(mu, bm);
        let lv_raw = g.matmul(h, wv);
        let lv_raw = g.add_row_vec(lv_raw, bv);
        // Bound log-variance to (−4, 4) so densities stay finite.
        let lv = g.scale(lv_raw, 0.25);
        let lv = g.tanh(lv);
        let lv = g.scale(lv, 4.0);
        (mu, lv)
    }

    /// Pure inference: `(mu, logvar)` for a feature batch.
    pub fn predict(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        if features.ndim() != 2 || features.shape()[1] != self.dim {
            return Err(Error::invalid(format!(
                "expected features [n, {}], got {:?}",
                self.dim,
                features.shape()
            )));
        }
        let mut g: Graph<f32> = Graph::new();
        let x = g.input(features);
        let (mu, lv) = self.forward(&mut g, x, true);
        Ok((g.value(mu), g.value(lv)))
    }
}

// ── Detector model ──────────────────────────────────────────────────────

#[derive(Debug)]
struct EncoderLayers {
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    conv3: Conv2d,
    gn3: GroupNorm,
    fc: Linear,
    head: Linear,
}

#[derive(Debug)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub params: ParamBlock,
    pub club: ClubHead,
    layers: EncoderLayers,
}

impl DetectorModel {
    pub fn init(config: DetectorConfig, rng: &mut SeededRng) -> Result<DetectorModel> {
        config.validate()?;
        let mut params = ParamBlock::new();
        let [w0, w1, w2] = config.widths;
        let layers = EncoderLayers {
            conv1: Conv2d::init(&mut params, "conv1", config.in_channels, w0, 3, 2, 1, rng),
            gn1: GroupNorm::init(&mut params, "gn1", w0, config.groups),
            conv2: Conv2d::init(&mut params, "conv2", w0, w1, 3, 2, 1, rng),
            gn2: GroupNorm::init(&mut params, "gn2", w1, config.groups),
            conv3: Conv2d::init(&mut params, "conv3", w1, w2, 3, 2, 1, rng),
            gn3: GroupNorm::init(&mut params, "gn3", w2, config.groups),
            fc: Linear::init(&mut params, "fc", w2, config.feature_dim, rng),
            head: Linear::init(&mut params, "head", config.feature_dim, config.num_classes, rng),
        };
        let club = ClubHead::init(config.feature_dim, rng);
        Ok(DetectorModel {
            config,
            params,
            club,
            layers,
        })
    }

    /// Encoder `f`: image batch node → feature node `[n, d]`.
    pub fn features<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> NodeId {
        self.features_in(g, &self.params, x)
    }

    /// [`DetectorModel::features`] against an external parameter store
    /// holding the same names (for finite-difference gradient checks).
    pub fn features_in<T: Scalar>(&self, g: &mut Graph<T>, block: &ParamBlock, x: NodeId) -> NodeId {
        let mut h = self.layers.conv1.forward(g, block, x);
        h = self.layers.gn1.forward(g, block, h);
        h = g.relu(h);
        h = self.layers.conv2.forward(g, block, h);
        h = self.layers.gn2.forward(g, block, h);
        h = g.relu(h);
        h = self.layers.conv3.forward(g, block, h);
        h = self.layers.gn3.forward(g, block, h);
        h = g.relu(h);
        let pooled = g.global_avg_pool(h);
        self.layers.fc.forward(g, block, pooled)
    }

    /// Head `g`: feature node → logit node `[n, C]`.
    pub fn head<T: Scalar>(&self, g: &mut Graph<T>, features: NodeId) -> NodeId {
        self.head_in(g, &self.params, features)
    }

    /// [`DetectorModel::head`] against an external parameter store.
    pub fn head_in<T: Scalar>(&self, g: &mut Graph<T>, block: &ParamBlock, features: NodeId) -> NodeId {
        self.layers.head.forward(g, block, features)
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        if images.ndim() != 4 || images.shape()[1] != self.config.in_channels {
            return Err(Error::invalid(format!(
                "expected images [n, {}, h, w], got {:?}",
                self.config.in_channels,
                images.shape()
            )));
        }
        Ok(())
    }

    /// Pure batched inference of features, chunked to bound graph size.
    pub fn features_for(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        self.infer(images, |g, m, x| m.features(g, x))
    }

    /// Pure batched inference of logits.
    pub fn logits_for(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        self.infer(images, |g, m, x| {
            let f = m.features(g, x);
            m.head(g, f)
        })
    }

    fn infer(
        &self,
        images: &Tensor,
        build: impl Fn(&mut Graph<f32>, &DetectorModel, NodeId) -> NodeId,
    ) -> Result<Tensor> {
        const CHUNK: usize = 256;
        let n = images.shape()[0];
        let mut rows: Vec<Tensor> = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let sub = slice_batch(images, start, end);
            let mut g: Graph<f32> = Graph::new();
            let x = g.input(&sub);
            let out = build(&mut g, self, x);
            let v = g.value(out);
            v.ensure_finite("detector inference")?;
            rows.push(v);
            start = end;
        }
        let mut shape = rows[0].shape().to_vec();
        shape[0] = n;
        let mut data = Vec::with_capacity(shape.iter().product());
        for r in &rows {
            data.extend_from_slice(r.data());
        }
        Ok(Tensor::new(shape, data))
    }

    /// Classification accuracy on a labeled batch (labels are class
    /// indices in `[0, C)`).
    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.logits_for(images)?;
        let c = self.config.num_classes;
        let mut hits = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits.data()[i * c..(i + 1) * c];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            hits += usize::from(pred == y);
        }
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    // ── Checkpointing ───────────────────────────────────────────────────

    pub fn to_archive(&self, extra_meta: &[(&str, String)]) -> Result<Archive> {
        let mut a = Archive::new();
        a.put_text("kind", "detector")?;
        a.put_text("config", self.config.to_meta())?;
        for (k, v) in extra_meta {
            a.put_text(k, v.clone())?;
        }
        for (name, value) in self.params.iter() {
            a.put_tensor(&format!("param.det.{name}"), value.clone())?;
        }
        for (name, value) in self.club.params.iter() {
            a.put_tensor(&format!("param.club.{name}"), value.clone())?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<DetectorModel> {
        if a.text("kind")? != "detector" {
            return Err(Error::config(format!(
                "checkpoint kind `{}` is not a detector",
                a.text("kind")?
            )));
        }
        let config = DetectorConfig::from_meta(a.text("config")?)?;
        let mut rng = SeededRng::new(0);
        let mut model = DetectorModel::init(config, &mut rng)?;
        let det_names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in det_names {
            model
                .params
                .load_value(&name, a.tensor(&format!("param.det.{name}"))?.clone())?;
        }
        let q_names: Vec<String> = model.club.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in q_names {
            model
                .club
                .params
                .load_value(&name, a.tensor(&format!("param.club.{name}"))?.clone())?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, extra_meta: &[(&str, String)]) -> Result<()> {
        self.to_archive(extra_meta)?.save(path)
    }

    pub fn load(path: &Path) -> Result<DetectorModel> {
        DetectorModel::from_archive(&Archive::load(path)?)
    }
}

/// Copy rows `[start, end)` of a batch tensor.
pub(crate) fn slice_batch(t: &Tensor, start: usize, end: usize) -> Tensor {
    let per = t.len() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, t.data()[start * per..end * per].to_vec())
}

// ── Energy scoring ──────────────────────────────────────────────────────

/// Energy of one logit row: `E = −log Σ_c exp(logit_c)`, computed in f64
/// with max-shifting. Higher energy ⇒ more OOD.
pub fn energy_from_logit_row(row: &[f32]) -> f64 {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    -(max + sum.ln())
}

/// Energy per sample from a `[n, C]` logit tensor.
pub fn energy_from_logits(logits: &Tensor) -> Result<Vec<f64>> {
    if logits.ndim() != 2 {
        return Err(Error::invalid(format!(
            "expected logits [n, C], got {:?}",
            logits.shape()
        )));
    }
    let c = logits.shape()[1];
    Ok(logits
        .data()
        .chunks_exact(c)
        .map(energy_from_logit_row)
        .collect())
}

/// Batched energy scores for raw images.
pub fn energy_scores(model: &DetectorModel, images: &Tensor) -> Result<Vec<f64>> {
    energy_from_logits(&model.logits_for(images)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model(seed: u64) -> DetectorModel {
        let cfg = DetectorConfig {
            in_channels: 3,
            num_classes: 4,
            widths: [4, 8, 8],
            feature_dim: 16,
            groups: 2,
        };
        let mut rng = SeededRng::new(seed);
        DetectorModel::init(cfg, &mut rng).unwrap()
    }

    #[test]
    fn feature_and_logit_shapes() {
        let model = small_model(0);
        let mut rng = SeededRng::new(1);
        let images = rng.uniform_tensor([5, 3, 16, 16], 0.0, 1.0);
        let f = model.features_for(&images).unwrap();
        assert_eq!(f.shape(), [5, 16]);
        let l = model.logits_for(&images).unwrap();
        assert_eq!(l.shape(), [5, 4]);
        assert!(model.logits_for(&rng.uniform_tensor([2, 1, 16, 16], 0.0, 1.0)).is_err());
    }

    #[test]
    fn chunked_inference_matches_single_pass() {
        // Force chunking by exceeding the chunk size with a tiny model.
        let model = small_model(2);
        let mut rng = SeededRng::new(3);
        let images = rng.uniform_tensor([300, 3, 8, 8], 0.0, 1.0);
        let all = model.logits_for(&images).unwrap();
        for &i in &[0usize, 255, 256, 299] {
            let one = slice_batch(&images, i, i + 1);
            let li = model.logits_for(&one).unwrap();
            assert_eq!(li.data(), &all.data()[i * 4..(i + 1) * 4], "row {i}");
        }
    }

    #[test]
    fn energy_oracles() {
        let two = Tensor::new([1, 2], vec![0.0, 0.0]);
        let e = energy_from_logits(&two).unwrap();
        assert!((e[0] - (-(2f64).ln())).abs() < 1e-12);

        let three = Tensor::new([1, 3], vec![1.0, 2.0, 3.0]);
        let e = energy_from_logits(&three).unwrap();
        let direct = -((1f64).exp() + (2f64).exp() + (3f64).exp()).ln();
        assert!((e[0] - direct).abs() < 1e-12);
        assert!((e[0] - (-3.40760596444438)).abs() < 1e-10);
    }

    #[test]
    fn energy_shift_identity() {
        // Quarter-grid logits and shifts add exactly in f32, so the f64
        // identity E(x + k) = E(x) − k must hold to solver precision.
        let mut rng = SeededRng::new(4);
        let logits = Tensor::new(
            [8, 5],
            (0..40).map(|_| rng.below(33) as f32 / 4.0 - 4.0).collect::<Vec<_>>(),
        );
        let base = energy_from_logits(&logits).unwrap();
        for &k in &[1.0f32, -2.5, 8.0] {
            let shifted = logits.map(|v| v + k);
            let e = energy_from_logits(&shifted).unwrap();
            for (a, b) in base.iter().zip(&e) {
                assert!((a - k as f64 - b).abs() <= 1e-12, "shift {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn club_head_predicts_bounded_logvar() {
        let mut rng = SeededRng::new(5);
        let q = ClubHead::init(8, &mut rng);
        let feats = rng.normal_tensor([6, 8]).map(|v| v * 100.0);
        let (mu, lv) = q.predict(&feats).unwrap();
        assert_eq!(mu.shape(), [6, 8]);
        assert_eq!(lv.shape(), [6, 8]);
        assert!(lv.data().iter().all(|&v| v.abs() <= 4.0));
        assert!(q.predict(&rng.normal_tensor([2, 4])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let model = small_model(6);
        let mut rng = SeededRng::new(7);
        let images = rng.uniform_tensor([3, 3, 8, 8], 0.0, 1.0);
        let before = model.logits_for(&images).unwrap();
        let feats = model.features_for(&images).unwrap();
        let (mu_b, _) = model.club.predict(&feats).unwrap();

        let bytes = model.to_archive(&[("tier", "full".into())]).unwrap().to_bytes();
        let loaded = DetectorModel::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        let after = loaded.logits_for(&images).unwrap();
        assert_eq!(before.data(), after.data());
        let (mu_a, _) = loaded.club.predict(&feats).unwrap();
        assert_eq!(mu_b.data(), mu_a.data());
    }
}
