//! Denoiser training with classifier-free guidance dropout: each example's
//! condition is replaced by the null token with probability `p_uncond`, so a
//! single network learns both conditional and unconditional prediction.

use super::denoiser::Denoiser;
use super::sample::add_noise;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{Adam, Graph};
use crate::rng::SeededRng;
use crate::tensor::{stack, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub p_uncond: f32,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            steps: 2000,
            batch_size: 32,
            lr: 2e-3,
            p_uncond: 0.1,
            seed: 0,
        }
    }
}

/// One optimization step: per example, draw `t ~ U{1..T}` and `ε ~ N(0,I)`,
/// drop the condition with probability `p_uncond`, form `z_t`, and take an
/// Adam step on the mean squared noise-prediction error. Returns the loss.
pub fn cfg_train_step(
    den: &mut Denoiser,
    sched: &NoiseSchedule,
    batch: &[(&Tensor, u32)],
    p_uncond: f32,
    adam: &mut Adam,
    rng: &mut SeededRng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("training batch is empty"));
    }
    if !(0.0..=1.0).contains(&p_uncond) {
        return Err(Error::invalid(format!(
            "p_uncond must be a probability, got {p_uncond}"
        )));
    }
    let mut noisy = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut ts = Vec::with_capacity(batch.len());
    let mut conds = Vec::with_capacity(batch.len());
    for &(z0, label) in batch {
        den.vocab.row(label)?;
        let t = rng.int_inclusive(1, sched.t_max());
        let eps = rng.normal_tensor(z0.shape().to_vec());
        let dropped = rng.uniform() < p_uncond;
        noisy.push(add_noise(z0, t, &eps, sched)?);
        targets.push(eps);
        ts.push(t);
        conds.push(if dropped { None } else { Some(label) });
    }
    let z_batch = stack(&noisy.iter().collect::<Vec<_>>());
    let eps_batch = stack(&targets.iter().collect::<Vec<_>>());

    let mut g: Graph<f32> = Graph::new();
    let z = g.input(&z_batch);
    let target = g.input(&eps_batch);
    let pred = den.forward(&mut g, z, &ts, &conds)?;
    let diff = g.sub(pred, target);
    let sq = g.mul(diff, diff);
    let loss_node = g.mean_all(sq);
    let loss = g.backward(loss_node)?;
    g.accumulate_grads(&mut den.params);
    adam.step(&mut den.params)?;
    den.params.zero_grads();
    Ok(loss)
}

#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    /// Loss after every step.
    pub losses: Vec<f64>,
}

impl TrainStats {
    /// Mean loss over the last `n` steps (or all, if fewer).
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = self.losses.len().min(n);
        if k == 0 {
            return f64::NAN;
        }
        self.losses[self.losses.len() - k..].iter().sum::<f64>() / k as f64
    }
}

/// Full training loop over a labeled image set, sampling batches with
/// replacement. Deterministic given `cfg.seed`.
pub fn train_diffusion(
    den: &mut Denoiser,
    sched: &NoiseSchedule,
    images: &[Tensor],
    labels: &[u32],
    cfg: &DiffusionTrainConfig,
) -> Result<TrainStats> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::invalid(format!(
            "need matching non-empty images/labels, got {}/{}",
            images.len(),
            labels.len()
        )));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::config("steps and batch_size must be positive"));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut stats = TrainStats::default();
    for _ in 0..cfg.steps {
        let batch: Vec<(&Tensor, u32)> = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.below(images.len());
                (&images[i], labels[i])
            })
            .collect();
        let loss = cfg_train_step(den, sched, &batch, cfg.p_uncond, &mut adam, &mut rng)?;
        stats.losses.push(loss);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::{DenoiserConfig, Vocabulary};

    fn tiny_denoiser(seed: u64) -> Denoiser {
        let cfg = DenoiserConfig {
            in_channels: 1,
            base_channels: 4,
            levels: 0,
            cond_dim: 8,
            groups: 2,
        };
        let mut rng = SeededRng::new(seed);
        Denoiser::init(cfg, Vocabulary::new(vec![0, 1]).unwrap(), &mut rng).unwrap()
    }

    fn toy_batch(rng: &mut SeededRng, n: usize) -> Vec<(Tensor, u32)> {
        (0..n)
            .map(|i| {
                let label = (i % 2) as u32;
                let mean = if label == 0 { -1.0 } else { 1.0 };
                let img = Tensor::new([1, 2, 2], vec![mean + 0.05 * rng.normal(); 4]);
                (img, label)
            })
            .collect()
    }

    #[test]
    fn train_step_reduces_loss_over_time() {
        let mut den = tiny_denoiser(0);
        let sched = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let mut rng = SeededRng::new(1);
        let data = toy_batch(&mut rng, 8);
        let mut adam = Adam::new(5e-3);
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..60 {
            let batch: Vec<(&Tensor, u32)> = data.iter().map(|(t, l)| (t, *l)).collect();
            let loss = cfg_train_step(&mut den, &sched, &batch, 0.1, &mut adam, &mut rng).unwrap();
            if step == 0 {
                first = loss;
            }
            last = loss;
        }
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn forced_drop_leaves_label_embeddings_untouched() {
        let mut den = tiny_denoiser(2);
        let sched = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let mut rng = SeededRng::new(3);
        let data = toy_batch(&mut rng, 4);
        let batch: Vec<(&Tensor, u32)> = data.iter().map(|(t, l)| (t, *l)).collect();
        let before = den.params.value("cond_embed.table").clone();
        let mut adam = Adam::new(1e-2);
        cfg_train_step(&mut den, &sched, &batch, 1.0, &mut adam, &mut rng).unwrap();
        let after = den.params.value("cond_embed.table");
        let dim = den.config.cond_dim;
        // Row 0 (null) must move; label rows must not.
        let row = |t: &Tensor, r: usize| t.data()[r * dim..(r + 1) * dim].to_vec();
        assert_ne!(row(&before, 0), row(after, 0), "null row should train");
        assert_eq!(row(&before, 1), row(after, 1), "label row must not train");
        assert_eq!(row(&before, 2), row(after, 2), "label row must not train");
    }

    #[test]
    fn never_dropped_leaves_null_embedding_untouched() {
        let mut den = tiny_denoiser(4);
        let sched = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let mut rng = SeededRng::new(5);
        let data = toy_batch(&mut rng, 4);
        let batch: Vec<(&Tensor, u32)> = data.iter().map(|(t, l)| (t, *l)).collect();
        let before = den.params.value("cond_embed.table").clone();
        let mut adam = Adam::new(1e-2);
        cfg_train_step(&mut den, &sched, &batch, 0.0, &mut adam, &mut rng).unwrap();
        let after = den.params.value("cond_embed.table");
        let dim = den.config.cond_dim;
        let row = |t: &Tensor, r: usize| t.data()[r * dim..(r + 1) * dim].to_vec();
        assert_eq!(row(&before, 0), row(after, 0), "null row must not train");
        assert_ne!(row(&before, 1), row(after, 1), "label rows should train");
    }

    #[test]
    fn empty_batch_and_bad_probability_error() {
        let mut den = tiny_denoiser(6);
        let sched = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let mut rng = SeededRng::new(7);
        let mut adam = Adam::new(1e-2);
        assert!(cfg_train_step(&mut den, &sched, &[], 0.1, &mut adam, &mut rng).is_err());
        let img = Tensor::zeros([1, 2, 2]);
        let batch = [(&img, 0u32)];
        assert!(cfg_train_step(&mut den, &sched, &batch, 1.5, &mut adam, &mut rng).is_err());
        assert!(cfg_train_step(&mut den, &sched, &[(&img, 9)], 0.1, &mut adam, &mut rng).is_err());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let run = |seed| {
            let mut den = tiny_denoiser(10);
            let sched = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
            let mut data_rng = SeededRng::new(11);
            let data = toy_batch(&mut data_rng, 6);
            let images: Vec<Tensor> = data.iter().map(|(t, _)| t.clone()).collect();
            let labels: Vec<u32> = data.iter().map(|(_, l)| *l).collect();
            let cfg = DiffusionTrainConfig {
                steps: 10,
                batch_size: 4,
                lr: 1e-2,
                p_uncond: 0.1,
                seed,
            };
            let stats = train_diffusion(&mut den, &sched, &images, &labels, &cfg).unwrap();
            (stats.losses, den.params.value("conv_in.weight").clone())
        };
        let (la, wa) = run(5);
        let (lb, wb) = run(5);
        assert_eq!(la, lb);
        assert_eq!(wa.data(), wb.data());
        let (lc, _) = run(6);
        assert_ne!(la, lc);
    }
}
