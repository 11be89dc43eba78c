//! Conditional noise predictor: a small convolutional U-Net over images,
//! conditioned on the timestep (sinusoidal features) and a class label
//! (learned embedding with a reserved null row for unconditional training).

use crate::data::archive::Archive;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Embedding, Graph, GroupNorm, Linear, NodeId, ParamBlock, Scalar};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use std::path::Path;

// ── Condition vocabulary ────────────────────────────────────────────────

/// Maps class labels to embedding-table rows. Row 0 is the reserved null
/// (unconditional) token; label rows start at 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    labels: Vec<u32>,
}

impl Vocabulary {
    pub const NULL_ROW: usize = 0;

    pub fn new(labels: Vec<u32>) -> Result<Vocabulary> {
        if labels.is_empty() {
            return Err(Error::config("condition vocabulary has no labels"));
        }
        let mut seen = std::collections::HashSet::new();
        for &l in &labels {
            if !seen.insert(l) {
                return Err(Error::config(format!("duplicate label {l} in vocabulary")));
            }
        }
        Ok(Vocabulary { labels })
    }

    /// Number of embedding rows (labels + null).
    pub fn num_rows(&self) -> usize {
        self.labels.len() + 1
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn contains(&self, label: u32) -> bool {
        self.labels.contains(&label)
    }

    /// Embedding row for a label.
    pub fn row(&self, label: u32) -> Result<usize> {
        self.labels
            .iter()
            .position(|&l| l == label)
            .map(|p| p + 1)
            .ok_or_else(|| Error::invalid(format!("label {label} is not in the vocabulary")))
    }

    /// Embedding row for an optional condition (`None` = null token).
    pub fn row_of(&self, cond: Option<u32>) -> Result<usize> {
        match cond {
            None => Ok(Self::NULL_ROW),
            Some(label) => self.row(label),
        }
    }

    fn to_csv(&self) -> String {
        self.labels
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    fn from_csv(csv: &str) -> Result<Vocabulary> {
        let labels = csv
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<u32>()
                    .map_err(|_| Error::config(format!("bad vocabulary entry `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Vocabulary::new(labels)
    }
}

// ── Architecture ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of stride-2 downsampling stages (0 keeps full resolution,
    /// which also supports degenerate 1×1 "images").
    pub levels: usize,
    /// Width of the time/condition embedding vector.
    pub cond_dim: usize,
    /// Group count for all normalization layers.
    pub groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 3,
            base_channels: 16,
            levels: 2,
            cond_dim: 32,
            groups: 4,
        }
    }
}

impl DenoiserConfig {
    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.cond_dim == 0 {
            return Err(Error::config("denoiser dimensions must be positive"));
        }
        if self.cond_dim % 2 != 0 {
            return Err(Error::config("cond_dim must be even (sin/cos pairs)"));
        }
        if self.levels > 3 {
            return Err(Error::config("at most 3 downsampling levels supported"));
        }
        for l in 0..=self.levels {
            if self.channels_at(l) % self.groups != 0 {
                return Err(Error::config(format!(
                    "groups {} must divide channel count {} at level {l}",
                    self.groups,
                    self.channels_at(l)
                )));
            }
        }
        Ok(())
    }

    /// Channel width at resolution level `l` (0 = full resolution).
    fn channels_at(&self, l: usize) -> usize {
        if l == 0 {
            self.base_channels
        } else {
            self.base_channels * 2
        }
    }

    fn to_meta(&self) -> String {
        format!(
            "in_channels={},base_channels={},levels={},cond_dim={},groups={}",
            self.in_channels, self.base_channels, self.levels, self.cond_dim, self.groups
        )
    }

    fn from_meta(meta: &str) -> Result<DenoiserConfig> {
        let mut cfg = DenoiserConfig::default();
        for kv in meta.split(',') {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::config(format!("bad config field `{kv}`")))?;
            let v: usize = v
                .parse()
                .map_err(|_| Error::config(format!("bad config value `{kv}`")))?;
            match k {
                "in_channels" => cfg.in_channels = v,
                "base_channels" => cfg.base_channels = v,
                "levels" => cfg.levels = v,
                "cond_dim" => cfg.cond_dim = v,
                "groups" => cfg.groups = v,
                other => return Err(Error::config(format!("unknown config key `{other}`"))),
            }
        }
        Ok(cfg)
    }
}

/// Residual block: two 3×3 convolutions with group-norm/ReLU, with the
/// conditioning vector injected as a per-sample channel bias after the
/// first convolution.
#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    cond_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
}

impl ResBlock {
    fn init(
        block: &mut ParamBlock,
        name: &str,
        channels: usize,
        cond_dim: usize,
        groups: usize,
        rng: &mut SeededRng,
    ) -> ResBlock {
        ResBlock {
            norm1: GroupNorm::init(block, &format!("{name}.norm1"), channels, groups),
            conv1: Conv2d::init(block, &format!("{name}.conv1"), channels, channels, 3, 1, 1, rng),
            cond_proj: Linear::init(block, &format!("{name}.cond"), cond_dim, channels, rng),
            norm2: GroupNorm::init(block, &format!("{name}.norm2"), channels, groups),
            conv2: Conv2d::init(block, &format!("{name}.conv2"), channels, channels, 3, 1, 1, rng),
        }
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        block: &ParamBlock,
        x: NodeId,
        cond: NodeId,
    ) -> NodeId {
        let mut h = self.norm1.forward(g, block, x);
        h = g.relu(h);
        h = self.conv1.forward(g, block, h);
        let e = self.cond_proj.forward(g, block, cond);
        h = g.add_sample_channel(h, e);
        h = self.norm2.forward(g, block, h);
        h = g.relu(h);
        h = self.conv2.forward(g, block, h);
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
struct Layers {
    time_fc: Linear,
    cond_embed: Embedding,
    conv_in: Conv2d,
    enc_blocks: Vec<ResBlock>,
    down_convs: Vec<Conv2d>,
    dec_convs: Vec<Conv2d>,
    dec_blocks: Vec<ResBlock>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

/// The conditional noise predictor with its parameters and vocabulary.
#[derive(Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub vocab: Vocabulary,
    pub params: ParamBlock,
    layers: Layers,
}

impl Denoiser {
    pub fn init(config: DenoiserConfig, vocab: Vocabulary, rng: &mut SeededRng) -> Result<Denoiser> {
        config.validate()?;
        let mut params = ParamBlock::new();
        let layers = Self::build_layers(&config, &vocab, &mut params, rng);
        Ok(Denoiser {
            config,
            vocab,
            params,
            layers,
        })
    }

    fn build_layers(
        cfg: &DenoiserConfig,
        vocab: &Vocabulary,
        params: &mut ParamBlock,
        rng: &mut SeededRng,
    ) -> Layers {
        let time_fc = Linear::init(params, "time_fc", cfg.cond_dim, cfg.cond_dim, rng);
        let cond_embed = Embedding::init(params, "cond_embed", vocab.num_rows(), cfg.cond_dim, 0.5, rng);
        let conv_in = Conv2d::init(
            params,
            "conv_in",
            cfg.in_channels,
            cfg.channels_at(0),
            3,
            1,
            1,
            rng,
        );
        let mut enc_blocks = Vec::new();
        let mut down_convs = Vec::new();
        for l in 0..=cfg.levels {
            enc_blocks.push(ResBlock::init(
                params,
                &format!("enc{l}"),
                cfg.channels_at(l),
                cfg.cond_dim,
                cfg.groups,
                rng,
            ));
            if l < cfg.levels {
                down_convs.push(Conv2d::init(
                    params,
                    &format!("down{l}"),
                    cfg.channels_at(l),
                    cfg.channels_at(l + 1),
                    3,
                    2,
                    1,
                    rng,
                ));
            }
        }
        let mut dec_convs = Vec::new();
        let mut dec_blocks = Vec::new();
        for l in (0..cfg.levels).rev() {
            dec_convs.push(Conv2d::init(
                params,
                &format!("up{l}"),
                cfg.channels_at(l + 1),
                cfg.channels_at(l),
                3,
                1,
                1,
                rng,
            ));
            dec_blocks.push(ResBlock::init(
                params,
                &format!("dec{l}"),
                cfg.channels_at(l),
                cfg.cond_dim,
                cfg.groups,
                rng,
            ));
        }
        let out_norm = GroupNorm::init(params, "out_norm", cfg.channels_at(0), cfg.groups);
        let out_conv = Conv2d::init(
            params,
            "out_conv",
            cfg.channels_at(0),
            cfg.in_channels,
            3,
            1,
            1,
            rng,
        );
        Layers {
            time_fc,
            cond_embed,
            conv_in,
            enc_blocks,
            down_convs,
            dec_convs,
            dec_blocks,
            out_norm,
            out_conv,
        }
    }

    /// Sinusoidal timestep features, `[n, cond_dim]`.
    fn time_features(&self, ts: &[usize]) -> Tensor {
        let d = self.config.cond_dim;
        let half = d / 2;
        let mut data = Vec::with_capacity(ts.len() * d);
        for &t in ts {
            for i in 0..half {
                let freq = (10_000f64).powf(-(i as f64) / half as f64);
                let angle = t as f64 * freq;
                data.push(angle.sin() as f32);
                data.push(angle.cos() as f32);
            }
        }
        Tensor::new([ts.len(), d], data)
    }

    /// Assemble the forward pass in an existing graph. `z` must be
    /// `[n, in_channels, h, w]`; `ts` and `conds` must have length `n`
    /// (`None` = unconditional/null token).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        z: NodeId,
        ts: &[usize],
        conds: &[Option<u32>],
    ) -> Result<NodeId> {
        self.forward_in(g, &self.params, z, ts, conds)
    }

    /// [`Denoiser::forward`] against an external parameter store holding
    /// the same names (used by the finite-difference gradient checks,
    /// which perturb a copy of the parameters).
    pub fn forward_in<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        block: &ParamBlock,
        z: NodeId,
        ts: &[usize],
        conds: &[Option<u32>],
    ) -> Result<NodeId> {
        let shape = g.shape(z).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::invalid(format!(
                "denoiser input must be [n, {}, h, w], got {shape:?}",
                self.config.in_channels
            )));
        }
        let n = shape[0];
        if ts.len() != n || conds.len() != n {
            return Err(Error::invalid(format!(
                "batch size {n} but {} timesteps / {} conditions",
                ts.len(),
                conds.len()
            )));
        }
        if self.config.levels > 0 {
            let div = 1 << self.config.levels;
            if shape[2] % div != 0 || shape[3] % div != 0 {
                return Err(Error::invalid(format!(
                    "spatial dims {}x{} not divisible by 2^levels = {div}",
                    shape[2], shape[3]
                )));
            }
        }
        let rows = conds
            .iter()
            .map(|&c| self.vocab.row_of(c))
            .collect::<Result<Vec<_>>>()?;

        let tfeat = self.time_features(ts);
        let tfeat = g.input(&tfeat);
        let tvec = self.layers.time_fc.forward(g, block, tfeat);
        let cvec = self.layers.cond_embed.forward(g, block, &rows);
        let cond = g.add(tvec, cvec);
        let cond = g.silu(cond);

        let mut h = self.layers.conv_in.forward(g, block, z);
        let mut skips = Vec::new();
        for l in 0..=self.config.levels {
            h = self.layers.enc_blocks[l].forward(g, block, h, cond);
            if l < self.config.levels {
                skips.push(h);
                h = self.layers.down_convs[l].forward(g, block, h);
            }
        }
        for (i, l) in (0..self.config.levels).rev().enumerate() {
            h = g.upsample_nearest_2x(h);
            h = self.layers.dec_convs[i].forward(g, block, h);
            let skip = skips[l];
            h = g.add(h, skip);
            h = self.layers.dec_blocks[i].forward(g, block, h, cond);
        }
        h = self.layers.out_norm.forward(g, block, h);
        h = g.relu(h);
        Ok(self.layers.out_conv.forward(g, block, h))
    }

    /// Batched inference: predict the noise in `z` at per-sample timesteps
    /// and conditions. Pure; does not mutate parameters.
    pub fn predict(&self, z: &Tensor, ts: &[usize], conds: &[Option<u32>]) -> Result<Tensor> {
        let mut g: Graph<f32> = Graph::new();
        let zin = g.input(z);
        let out = self.forward(&mut g, zin, ts, conds)?;
        g.value(out).ensure_finite("denoiser::predict")?;
        Ok(g.value(out))
    }

    /// Single-sample convenience around [`Denoiser::predict`].
    pub fn predict_one(&self, z: &Tensor, t: usize, cond: Option<u32>) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(z.shape());
        let batched = z.clone().reshaped(shape);
        let out = self.predict(&batched, &[t], &[cond])?;
        Ok(crate::tensor::unstack_one(&out, 0))
    }

    // ── Checkpointing ───────────────────────────────────────────────────

    pub fn to_archive(&self, extra_meta: &[(&str, String)]) -> Result<Archive> {
        let mut a = Archive::new();
        a.put_text("kind", "denoiser")?;
        a.put_text("config", self.config.to_meta())?;
        a.put_text("vocab", self.vocab.to_csv())?;
        for (k, v) in extra_meta {
            a.put_text(k, v.clone())?;
        }
        for (name, value) in self.params.iter() {
            a.put_tensor(&format!("param.{name}"), value.clone())?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Denoiser> {
        if a.text("kind")? != "denoiser" {
            return Err(Error::config(format!(
                "checkpoint kind `{}` is not a denoiser",
                a.text("kind")?
            )));
        }
        let config = DenoiserConfig::from_meta(a.text("config")?)?;
        let vocab = Vocabulary::from_csv(a.text("vocab")?)?;
        // Rebuild the architecture (any seed: values are overwritten below).
        let mut rng = SeededRng::new(0);
        let mut den = Denoiser::init(config, vocab, &mut rng)?;
        let names: Vec<String> = den.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let stored = a.tensor(&format!("param.{name}"))?;
            den.params.load_value(&name, stored.clone())?;
        }
        Ok(den)
    }

    pub fn save(&self, path: &Path, extra_meta: &[(&str, String)]) -> Result<()> {
        self.to_archive(extra_meta)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Denoiser> {
        Denoiser::from_archive(&Archive::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 2,
            base_channels: 4,
            levels: 1,
            cond_dim: 8,
            groups: 2,
        }
    }

    fn tiny_denoiser(seed: u64) -> Denoiser {
        let mut rng = SeededRng::new(seed);
        Denoiser::init(tiny_config(), Vocabulary::new(vec![3, 9]).unwrap(), &mut rng).unwrap()
    }

    #[test]
    fn vocabulary_rows_and_errors() {
        let v = Vocabulary::new(vec![5, 2, 8]).unwrap();
        assert_eq!(v.num_rows(), 4);
        assert_eq!(v.row_of(None).unwrap(), Vocabulary::NULL_ROW);
        assert_eq!(v.row_of(Some(5)).unwrap(), 1);
        assert_eq!(v.row_of(Some(8)).unwrap(), 3);
        assert!(v.row_of(Some(7)).is_err());
        assert!(Vocabulary::new(vec![1, 1]).is_err());
        assert!(Vocabulary::new(vec![]).is_err());
        assert_eq!(Vocabulary::from_csv(&v.to_csv()).unwrap(), v);
    }

    #[test]
    fn output_shape_matches_input_shape() {
        let den = tiny_denoiser(1);
        let mut rng = SeededRng::new(2);
        for shape in [[2usize, 2, 8, 8], [1, 2, 4, 4]] {
            let z = rng.normal_tensor(shape.to_vec());
            let conds: Vec<Option<u32>> = (0..shape[0])
                .map(|i| if i % 2 == 0 { Some(3) } else { None })
                .collect();
            let ts: Vec<usize> = (0..shape[0]).map(|i| i + 1).collect();
            let out = den.predict(&z, &ts, &conds).unwrap();
            assert_eq!(out.shape(), shape);
        }
    }

    #[test]
    fn levels_zero_supports_single_pixel_inputs() {
        let cfg = DenoiserConfig {
            in_channels: 1,
            base_channels: 4,
            levels: 0,
            cond_dim: 8,
            groups: 2,
        };
        let mut rng = SeededRng::new(3);
        let den = Denoiser::init(cfg, Vocabulary::new(vec![0, 1]).unwrap(), &mut rng).unwrap();
        let z = Tensor::new([1, 1, 1, 1], vec![0.7]);
        let out = den.predict(&z, &[5], &[Some(1)]).unwrap();
        assert_eq!(out.shape(), [1, 1, 1, 1]);
    }

    #[test]
    fn batched_forward_equals_per_sample_forward_bitwise() {
        let den = tiny_denoiser(7);
        let mut rng = SeededRng::new(8);
        let z = rng.normal_tensor([3, 2, 8, 8]);
        let ts = [1usize, 25, 50];
        let conds = [Some(3), None, Some(9)];
        let batched = den.predict(&z, &ts, &conds).unwrap();
        for i in 0..3 {
            let zi = crate::tensor::unstack_one(&z, i);
            let single = den.predict_one(&zi, ts[i], conds[i]).unwrap();
            assert_eq!(
                crate::tensor::unstack_one(&batched, i).data(),
                single.data(),
                "sample {i} differs between batched and single forward"
            );
        }
    }

    #[test]
    fn condition_and_timestep_change_the_output() {
        let den = tiny_denoiser(4);
        let mut rng = SeededRng::new(5);
        let z = rng.normal_tensor([1, 2, 8, 8]);
        let a = den.predict(&z, &[10], &[Some(3)]).unwrap();
        let b = den.predict(&z, &[10], &[Some(9)]).unwrap();
        let c = den.predict(&z, &[10], &[None]).unwrap();
        let d = den.predict(&z, &[40], &[Some(3)]).unwrap();
        let diff = |x: &Tensor, y: &Tensor| x.zip(y, |p, q| (p - q).abs()).max_abs();
        assert!(diff(&a, &b) > 0.0, "labels are ignored");
        assert!(diff(&a, &c) > 0.0, "null condition is ignored");
        assert!(diff(&a, &d) > 0.0, "timestep is ignored");
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let den = tiny_denoiser(11);
        let a = den.to_archive(&[("steps", "123".into())]).unwrap();
        let bytes = a.to_bytes();
        let reloaded = Denoiser::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(reloaded.config, den.config);
        assert_eq!(reloaded.vocab, den.vocab);
        let mut rng = SeededRng::new(12);
        let z = rng.normal_tensor([2, 2, 8, 8]);
        let before = den.predict(&z, &[4, 9], &[Some(3), None]).unwrap();
        let after = reloaded.predict(&z, &[4, 9], &[Some(3), None]).unwrap();
        assert_eq!(before.data(), after.data());
        assert_eq!(Archive::from_bytes(&bytes).unwrap().text("steps").unwrap(), "123");
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let den = tiny_denoiser(13);
        let z = Tensor::zeros([1, 2, 8, 8]);
        assert!(den.predict(&z, &[1, 2], &[Some(3)]).is_err());
        assert!(den.predict(&z, &[1], &[Some(4)]).is_err(), "unknown label");
        let bad = Tensor::zeros([1, 3, 8, 8]);
        assert!(den.predict(&bad, &[1], &[Some(3)]).is_err());
        let odd = Tensor::zeros([1, 2, 7, 7]);
        assert!(den.predict(&odd, &[1], &[Some(3)]).is_err());
    }
}
