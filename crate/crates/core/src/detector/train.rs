//! Detector training: cross-entropy on labeled in-distribution images,
//! optionally regularized by an outlier-exposure term on generated
//! outliers and a mutual-information penalty between paired source and
//! outlier features.
//!
//! The mutual-information penalty is estimated by a variational head that
//! is trained in alternation with the detector: each batch first takes
//! one likelihood step on the head (with encoder features detached), then
//! one step on the detector (with the head's weights frozen).

use super::losses::{
    club_estimate_node, club_q_nll_node, loss_ce_node, loss_oe_literal_node, loss_oe_node,
};
use super::DetectorModel;
use crate::error::{Error, Result};
use crate::guidance::OutlierSet;
use crate::nn::{Adam, Graph};
use crate::rng::SeededRng;
use crate::tensor::{stack, unstack_one, Tensor};

/// Which loss terms a detector is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTier {
    /// Cross-entropy only.
    Ce,
    /// Cross-entropy plus outlier exposure.
    CeOe,
    /// Cross-entropy, outlier exposure, and the mutual-information penalty.
    Full,
}

impl LossTier {
    pub fn name(self) -> &'static str {
        match self {
            LossTier::Ce => "ce",
            LossTier::CeOe => "ce+oe",
            LossTier::Full => "full",
        }
    }

    pub fn from_name(name: &str) -> Result<LossTier> {
        match name {
            "ce" => Ok(LossTier::Ce),
            "ce+oe" => Ok(LossTier::CeOe),
            "full" => Ok(LossTier::Full),
            other => Err(Error::config(format!(
                "unknown loss tier `{other}` (expected ce, ce+oe, or full)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Learning rate of the variational head.
    pub q_lr: f32,
    /// Weight of the outlier-exposure term.
    pub beta: f64,
    /// Weight of the mutual-information penalty.
    pub gamma_mi: f64,
    /// Use the degenerate no-log outlier-exposure form (constant loss,
    /// no gradient); selectable only to demonstrate its failure.
    pub oe_literal: bool,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> DetectorTrainConfig {
        DetectorTrainConfig {
            epochs: 8,
            batch_size: 64,
            lr: 1e-3,
            q_lr: 1e-3,
            beta: 0.5,
            gamma_mi: 0.1,
            oe_literal: false,
            seed: 0,
        }
    }
}

impl DetectorTrainConfig {
    /// The default weighting for a tier: `ce` zeroes both extra terms,
    /// `ce+oe` zeroes only the mutual-information penalty.
    pub fn for_tier(tier: LossTier) -> DetectorTrainConfig {
        DetectorTrainConfig::default().tiered(tier)
    }

    /// Zero out the loss weights a tier does not use, keeping everything
    /// else.
    pub fn tiered(mut self, tier: LossTier) -> DetectorTrainConfig {
        match tier {
            LossTier::Ce => {
                self.beta = 0.0;
                self.gamma_mi = 0.0;
            }
            LossTier::CeOe => self.gamma_mi = 0.0,
            LossTier::Full => {}
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if self.beta < 0.0 || self.gamma_mi < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if !(self.lr > 0.0) || !(self.q_lr > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        Ok(())
    }
}

/// Per-epoch mean losses. Inactive terms are recorded as zero.
#[derive(Debug, Clone, Default)]
pub struct DetectorTrainStats {
    pub epoch_ce: Vec<f64>,
    pub epoch_oe: Vec<f64>,
    pub epoch_club: Vec<f64>,
    pub epoch_q_nll: Vec<f64>,
    pub epoch_total: Vec<f64>,
}

fn gather(images: &Tensor, idx: &[usize]) -> Tensor {
    let rows: Vec<Tensor> = idx.iter().map(|&i| unstack_one(images, i)).collect();
    stack(&rows.iter().collect::<Vec<_>>())
}

/// Train `model` in place. `images[i]` is a `[C, H, W]` in-distribution
/// image with class index `labels[i]` in `[0, C)`. Outliers are required
/// whenever `beta > 0` or `gamma_mi > 0`; the mutual-information penalty
/// additionally requires every outlier's `source_indices` entry to point
/// into `images`, since it is estimated over (source, outlier) pairs.
pub fn train_detector(
    model: &mut DetectorModel,
    images: &[Tensor],
    labels: &[usize],
    outliers: Option<&OutlierSet>,
    cfg: &DetectorTrainConfig,
) -> Result<DetectorTrainStats> {
    cfg.validate()?;
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::invalid(format!(
            "need matching non-empty images/labels, got {}/{}",
            images.len(),
            labels.len()
        )));
    }
    let num_classes = model.config.num_classes;
    for &y in labels {
        if y >= num_classes {
            return Err(Error::invalid(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
    }
    let shape = images[0].shape().to_vec();
    if shape.len() != 3 || shape[0] != model.config.in_channels {
        return Err(Error::invalid(format!(
            "expected images [{}, h, w], got {shape:?}",
            model.config.in_channels
        )));
    }
    if images.iter().any(|t| t.shape() != shape) {
        return Err(Error::invalid("images must share one shape"));
    }

    let needs_outliers = cfg.beta > 0.0 || cfg.gamma_mi > 0.0;
    let outlier_count = outliers.map_or(0, |s| s.len());
    if needs_outliers {
        let set = outliers.ok_or_else(|| {
            Error::config("outlier exposure and the MI penalty require an outlier set")
        })?;
        if set.len() == 0 {
            return Err(Error::config("outlier set is empty"));
        }
        if set.images.shape()[1..] != shape[..] {
            return Err(Error::invalid(format!(
                "outlier images {:?} do not match training images {shape:?}",
                set.images.shape()
            )));
        }
        if cfg.gamma_mi > 0.0 {
            if let Some(&bad) = set.source_indices.iter().find(|&&i| i >= images.len()) {
                return Err(Error::config(format!(
                    "outlier provenance index {bad} is outside the training set \
                     ({} images); the MI penalty needs valid (source, outlier) pairs",
                    images.len()
                )));
            }
        }
    }

    let mut rng = SeededRng::new(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut adam_q = Adam::new(cfg.q_lr);
    let mut stats = DetectorTrainStats::default();

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        rng.shuffle(&mut order);
        let mut sums = [0.0f64; 5]; // ce, oe, club, q_nll, total
        let mut batches = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            // Draw the shared outlier batch only when a term consumes it,
            // so tiers that ignore outliers take an identical RNG path to
            // training without any outlier set.
            let out_idx: Vec<usize> = if needs_outliers {
                (0..chunk.len()).map(|_| rng.below(outlier_count)).collect()
            } else {
                Vec::new()
            };
            let set = outliers.filter(|_| needs_outliers);

            // Variational-head step on detached features.
            let mut q_nll = 0.0f64;
            if cfg.gamma_mi > 0.0 {
                let set = set.unwrap();
                let src_imgs: Vec<Tensor> = out_idx
                    .iter()
                    .map(|&j| images[set.source_indices[j]].clone())
                    .collect();
                let src_batch = stack(&src_imgs.iter().collect::<Vec<_>>());
                let feat_src = model.features_for(&src_batch)?;
                let feat_ood = model.features_for(&gather(&set.images, &out_idx))?;
                let mut g: Graph<f32> = Graph::new();
                let x = g.input(&feat_src);
                let y = g.input(&feat_ood);
                let (mu, lv) = model.club.forward(&mut g, x, false);
                let nll = club_q_nll_node(&mut g, mu, lv, y);
                q_nll = g.backward(nll)?;
                g.accumulate_grads(&mut model.club.params);
                adam_q.step(&mut model.club.params)?;
                model.club.params.zero_grads();
            }

            // Detector step with the variational head frozen.
            let id_imgs: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            let id_batch = stack(&id_imgs);
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();

            let mut g: Graph<f32> = Graph::new();
            let x_id = g.input(&id_batch);
            let feat_id = model.features(&mut g, x_id);
            let logits_id = model.head(&mut g, feat_id);
            let ce = loss_ce_node(&mut g, logits_id, &batch_labels);
            let mut total = ce;
            let mut oe_val = 0.0f64;
            let mut club_val = 0.0f64;

            let feat_ood_node = if needs_outliers {
                let set = set.unwrap();
                let x_ood = g.input(&gather(&set.images, &out_idx));
                Some(model.features(&mut g, x_ood))
            } else {
                None
            };
            if cfg.beta > 0.0 {
                let logits_ood = model.head(&mut g, feat_ood_node.unwrap());
                let oe = if cfg.oe_literal {
                    loss_oe_literal_node(&mut g, logits_ood)
                } else {
                    loss_oe_node(&mut g, logits_ood)
                };
                oe_val = g.scalar_value(oe);
                let weighted = g.scale(oe, cfg.beta);
                total = g.add(total, weighted);
            }
            if cfg.gamma_mi > 0.0 {
                let set = set.unwrap();
                let src_imgs: Vec<Tensor> = out_idx
                    .iter()
                    .map(|&j| images[set.source_indices[j]].clone())
                    .collect();
                let src_batch = stack(&src_imgs.iter().collect::<Vec<_>>());
                let x_src = g.input(&src_batch);
                let feat_src = model.features(&mut g, x_src);
                let (mu, lv) = model.club.forward(&mut g, feat_src, true);
                let club = club_estimate_node(&mut g, mu, lv, feat_ood_node.unwrap());
                club_val = g.scalar_value(club);
                let weighted = g.scale(club, cfg.gamma_mi);
                total = g.add(total, weighted);
            }

            let total_val = g.backward(total)?;
            g.accumulate_grads(&mut model.params);
            adam.step(&mut model.params)?;
            model.params.zero_grads();

            let ce_val = g.scalar_value(ce);
            sums[0] += ce_val;
            sums[1] += oe_val;
            sums[2] += club_val;
            sums[3] += q_nll;
            sums[4] += total_val;
            batches += 1;
        }

        let b = batches as f64;
        stats.epoch_ce.push(sums[0] / b);
        stats.epoch_oe.push(sums[1] / b);
        stats.epoch_club.push(sums[2] / b);
        stats.epoch_q_nll.push(sums[3] / b);
        stats.epoch_total.push(sums[4] / b);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{loss_oe, DetectorConfig};
    use crate::rng::SeededRng;

    fn tiny_model(seed: u64) -> DetectorModel {
        let cfg = DetectorConfig {
            in_channels: 3,
            num_classes: 2,
            widths: [4, 4, 8],
            feature_dim: 8,
            groups: 2,
        };
        let mut rng = SeededRng::new(seed);
        DetectorModel::init(cfg, &mut rng).unwrap()
    }

    /// Two trivially separable classes: bright vs dark images.
    fn toy_data(n: usize, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
        let mut rng = SeededRng::new(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let base = if y == 0 { 0.15 } else { 0.85 };
            let img = rng
                .uniform_tensor([3, 8, 8], -0.05, 0.05)
                .map(|v| v + base);
            images.push(img);
            labels.push(y);
        }
        (images, labels)
    }

    fn toy_outliers(images: &[Tensor], m: usize, seed: u64) -> OutlierSet {
        let mut rng = SeededRng::new(seed);
        let mut outs = Vec::new();
        let mut sources = Vec::new();
        for j in 0..m {
            let src = j % images.len();
            // A mid-gray perturbation of the source, unlike either class.
            let noise = rng.uniform_tensor([3, 8, 8], -0.1, 0.1);
            let img = Tensor::new(
                [3usize, 8, 8],
                images[src]
                    .data()
                    .iter()
                    .zip(noise.data())
                    .map(|(&a, &b)| (0.5 * a + 0.25 + b).clamp(0.0, 1.0))
                    .collect::<Vec<_>>(),
            );
            outs.push(img);
            sources.push(src);
        }
        OutlierSet {
            images: stack(&outs.iter().collect::<Vec<_>>()),
            source_indices: sources,
            ood_labels: vec![0; m],
            tilde_ts: vec![1; m],
            seeds: vec![seed; m],
        }
    }

    fn quick_cfg(tier: LossTier) -> DetectorTrainConfig {
        let mut cfg = DetectorTrainConfig::for_tier(tier);
        cfg.epochs = 3;
        cfg.batch_size = 8;
        cfg.seed = 7;
        cfg
    }

    #[test]
    fn learns_a_separable_toy_problem() {
        let mut model = tiny_model(1);
        let (images, labels) = toy_data(32, 2);
        let mut cfg = quick_cfg(LossTier::Ce);
        cfg.epochs = 20;
        let stats = train_detector(&mut model, &images, &labels, None, &cfg).unwrap();
        assert!(stats.epoch_ce.last().unwrap() < &stats.epoch_ce[0]);
        let batch = stack(&images.iter().collect::<Vec<_>>());
        let acc = model.accuracy(&batch, &labels).unwrap();
        assert!(acc > 0.9, "accuracy {acc} on a separable toy problem");
    }

    #[test]
    fn ce_tier_is_bitwise_independent_of_outliers() {
        let (images, labels) = toy_data(16, 3);
        let outliers = toy_outliers(&images, 8, 4);

        let mut a = tiny_model(5);
        train_detector(&mut a, &images, &labels, None, &quick_cfg(LossTier::Ce)).unwrap();
        let mut b = tiny_model(5);
        train_detector(
            &mut b,
            &images,
            &labels,
            Some(&outliers),
            &quick_cfg(LossTier::Ce),
        )
        .unwrap();

        for (name, value) in a.params.iter() {
            assert_eq!(
                value.data(),
                b.params.value(name).data(),
                "parameter {name} diverged"
            );
        }
    }

    #[test]
    fn oe_term_flattens_outlier_predictions() {
        let (images, labels) = toy_data(32, 6);
        let outliers = toy_outliers(&images, 16, 7);

        let mut plain = tiny_model(8);
        train_detector(&mut plain, &images, &labels, None, &quick_cfg(LossTier::Ce)).unwrap();
        let mut exposed = tiny_model(8);
        let mut cfg = quick_cfg(LossTier::CeOe);
        cfg.epochs = 6;
        train_detector(&mut exposed, &images, &labels, Some(&outliers), &cfg).unwrap();

        let oe_plain = loss_oe(&plain.logits_for(&outliers.images).unwrap()).unwrap();
        let oe_exposed = loss_oe(&exposed.logits_for(&outliers.images).unwrap()).unwrap();
        assert!(
            oe_exposed < oe_plain,
            "exposure should flatten outlier logits: {oe_exposed} vs {oe_plain}"
        );
    }

    #[test]
    fn full_tier_runs_and_trains_the_variational_head() {
        let (images, labels) = toy_data(16, 9);
        let outliers = toy_outliers(&images, 8, 10);
        let mut model = tiny_model(11);
        let mut cfg = quick_cfg(LossTier::Full);
        cfg.epochs = 5;
        let stats = train_detector(&mut model, &images, &labels, Some(&outliers), &cfg).unwrap();
        assert!(stats.epoch_q_nll.iter().all(|v| v.is_finite()));
        assert!(stats.epoch_club.iter().all(|v| v.is_finite()));
        assert!(
            stats.epoch_q_nll.last().unwrap() < &stats.epoch_q_nll[0],
            "variational head log-likelihood should improve: {:?}",
            stats.epoch_q_nll
        );
    }

    #[test]
    fn missing_or_broken_outliers_are_rejected() {
        let (images, labels) = toy_data(8, 12);
        let mut model = tiny_model(13);

        // Terms that need outliers but got none.
        for tier in [LossTier::CeOe, LossTier::Full] {
            let err = train_detector(&mut model, &images, &labels, None, &quick_cfg(tier));
            assert!(err.is_err(), "{tier:?} must require outliers");
        }

        // Provenance pointing outside the training set.
        let mut broken = toy_outliers(&images, 4, 14);
        broken.source_indices[2] = images.len();
        let err = train_detector(
            &mut model,
            &images,
            &labels,
            Some(&broken),
            &quick_cfg(LossTier::Full),
        );
        assert!(err.is_err(), "bad provenance must be rejected");
        // But exposure alone never touches provenance.
        train_detector(
            &mut model,
            &images,
            &labels,
            Some(&broken),
            &quick_cfg(LossTier::CeOe),
        )
        .unwrap();
    }

    #[test]
    fn label_and_shape_validation() {
        let (images, labels) = toy_data(8, 15);
        let mut model = tiny_model(16);
        let mut bad = labels.clone();
        bad[0] = 2;
        assert!(train_detector(&mut model, &images, &bad, None, &quick_cfg(LossTier::Ce)).is_err());
        assert!(
            train_detector(&mut model, &[], &[], None, &quick_cfg(LossTier::Ce)).is_err()
        );
        let mut mixed = images.clone();
        mixed[3] = Tensor::zeros([3, 4, 4]);
        assert!(
            train_detector(&mut model, &mixed, &labels, None, &quick_cfg(LossTier::Ce)).is_err()
        );
    }

    #[test]
    fn tier_names_round_trip() {
        for tier in [LossTier::Ce, LossTier::CeOe, LossTier::Full] {
            assert_eq!(LossTier::from_name(tier.name()).unwrap(), tier);
        }
        assert!(LossTier::from_name("energy").is_err());
    }
}
