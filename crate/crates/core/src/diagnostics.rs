//! Self-check suite: finite-difference verification of every
//! differentiable block the crate ships, from single graph operations up
//! to the full denoiser, detector, and variational-head composites.
//!
//! The suite is part of the library (not just the tests) so integration
//! targets and the acceptance harness can run the exact same checks.

use crate::detector::losses::{club_estimate_node, club_q_nll_node, loss_ce_node, loss_oe_node};
use crate::detector::{DetectorConfig, DetectorModel};
use crate::diffusion::{Denoiser, DenoiserConfig, Vocabulary};
use crate::error::Result;
use crate::nn::gradcheck::{gradient_check, GradCheckReport};
use crate::nn::{Graph, Linear, NodeId, ParamBlock};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

const STEP: f64 = 1e-4;
const TOLERANCE: f64 = 1e-3;
const CHECKS_PER_PARAM: usize = 4;

fn run(
    name: &'static str,
    mut block: ParamBlock,
    build: impl Fn(&mut Graph<f64>, &ParamBlock) -> NodeId,
) -> Result<SuiteEntry> {
    let mut rng = SeededRng::new(0xD1A6);
    let report = gradient_check(&mut block, STEP, TOLERANCE, CHECKS_PER_PARAM, &mut rng, build)?;
    Ok(SuiteEntry { name, report })
}

/// Values bounded away from zero (|v| ∈ [0.25, 1]) so kinked activations
/// are differentiable at every perturbed point.
fn away_from_zero(rng: &mut SeededRng, shape: Vec<usize>) -> Tensor {
    let magnitudes = rng.uniform_tensor(shape, 0.25, 1.0);
    let signs: Vec<f32> = (0..magnitudes.len())
        .map(|_| if rng.below(2) == 0 { -1.0 } else { 1.0 })
        .collect();
    Tensor::new(
        magnitudes.shape().to_vec(),
        magnitudes
            .data()
            .iter()
            .zip(&signs)
            .map(|(&m, &s)| m * s)
            .collect::<Vec<f32>>(),
    )
}

fn pair_block(seed: u64, shape: &[usize]) -> ParamBlock {
    let mut rng = SeededRng::new(seed);
    let mut block = ParamBlock::new();
    block.insert("a", rng.normal_tensor(shape.to_vec()));
    block.insert("b", rng.normal_tensor(shape.to_vec()));
    block
}

/// Run the whole gradient suite. Deterministic; returns one report per
/// block so failures can name the offending operation and coordinate.
pub fn gradient_suite() -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();
    let sq_mean = |g: &mut Graph<f64>, x: NodeId| {
        let sq = g.mul(x, x);
        g.mean_all(sq)
    };

    // ── Elementwise arithmetic ──────────────────────────────────────────
    entries.push(run("op.add", pair_block(101, &[3, 4]), |g, b| {
        let (a, v) = (g.param(b, "a"), g.param(b, "b"));
        let s = g.add(a, v);
        sq_mean(g, s)
    })?);
    entries.push(run("op.sub", pair_block(102, &[3, 4]), |g, b| {
        let (a, v) = (g.param(b, "a"), g.param(b, "b"));
        let s = g.sub(a, v);
        sq_mean(g, s)
    })?);
    entries.push(run("op.mul", pair_block(103, &[3, 4]), |g, b| {
        let (a, v) = (g.param(b, "a"), g.param(b, "b"));
        let m = g.mul(a, v);
        let m2 = g.mul(m, a);
        g.sum_all(m2)
    })?);
    entries.push(run("op.scale", pair_block(104, &[2, 5]), |g, b| {
        let a = g.param(b, "a");
        let s = g.scale(a, -0.7);
        sq_mean(g, s)
    })?);

    // ── Activations ─────────────────────────────────────────────────────
    {
        let mut rng = SeededRng::new(105);
        let mut block = ParamBlock::new();
        block.insert("a", away_from_zero(&mut rng, vec![4, 4]));
        entries.push(run("op.relu", block, |g, b| {
            let a = g.param(b, "a");
            let r = g.relu(a);
            sq_mean(g, r)
        })?);
    }
    for (name, op) in [
        ("op.silu", 0usize),
        ("op.tanh", 1),
        ("op.exp", 2),
    ] {
        entries.push(run(name, pair_block(106 + op as u64, &[3, 3]), move |g, b| {
            let a = g.param(b, "a");
            let y = match op {
                0 => g.silu(a),
                1 => g.tanh(a),
                _ => g.exp(a),
            };
            sq_mean(g, y)
        })?);
    }

    // ── Linear algebra and broadcasts ───────────────────────────────────
    {
        let mut rng = SeededRng::new(110);
        let mut block = ParamBlock::new();
        block.insert("x", rng.normal_tensor([3, 4]));
        block.insert("w", rng.normal_tensor([4, 2]));
        entries.push(run("op.matmul", block, |g, b| {
            let (x, w) = (g.param(b, "x"), g.param(b, "w"));
            let y = g.matmul(x, w);
            sq_mean(g, y)
        })?);
    }
    {
        let mut rng = SeededRng::new(111);
        let mut block = ParamBlock::new();
        block.insert("x", rng.normal_tensor([3, 4]));
        block.insert("v", rng.normal_tensor([4]));
        entries.push(run("op.add_row_vec", block.clone(), |g, b| {
            let (x, v) = (g.param(b, "x"), g.param(b, "v"));
            let y = g.add_row_vec(x, v);
            sq_mean(g, y)
        })?);
        entries.push(run("op.mul_row_vec", block, |g, b| {
            let (x, v) = (g.param(b, "x"), g.param(b, "v"));
            let y = g.mul_row_vec(x, v);
            sq_mean(g, y)
        })?);
    }
    entries.push(run("op.col_sum", pair_block(112, &[5, 3]), |g, b| {
        let a = g.param(b, "a");
        let c = g.col_sum(a);
        sq_mean(g, c)
    })?);

    // ── Image-shaped ops ────────────────────────────────────────────────
    {
        let mut rng = SeededRng::new(113);
        let mut block = ParamBlock::new();
        block.insert("x", rng.normal_tensor([2, 4, 3, 3]));
        block.insert("bias", rng.normal_tensor([4]));
        entries.push(run("op.add_channel_bias", block, |g, b| {
            let (x, bias) = (g.param(b, "x"), g.param(b, "bias"));
            let y = g.add_channel_bias(x, bias);
            sq_mean(g, y)
        })?);
    }
    {
        let mut rng = SeededRng::new(114);
        let mut block = ParamBlock::new();
        block.insert("x", rng.normal_tensor([2, 3, 2, 2]));
        block.insert("e", rng.normal_tensor([2, 3]));
        entries.push(run("op.add_sample_channel", block, |g, b| {
            let (x, e) = (g.param(b, "x"), g.param(b, "e"));
            let y = g.add_sample_channel(x, e);
            sq_mean(g, y)
        })?);
    }
    {
        let mut rng = SeededRng::new(115);
        let mut block = ParamBlock::new();
        block.insert("x", rng.normal_tensor([2, 3, 4, 4]));
        block.insert("w", rng.normal_tensor([4, 3, 3, 3]));
        entries.push(run("op.conv2d_s1", block, |g, b| {
            let (x, w) = (g.param(b, "x"), g.param(b, "w"));
            let y = g.conv2d(x, w, 1, 1);
            sq_mean(g, y)
        })?);
        let mut block = ParamBlock::new();
        block.insert("x", rng.normal_tensor([1, 2, 6, 6]));
        block.insert("w", rng.normal_tensor([3, 2, 3, 3]));
        entries.push(run("op.conv2d_s2", block, |g, b| {
            let (x, w) = (g.param(b, "x"), g.param(b, "w"));
            let y = g.conv2d(x, w, 2, 1);
            sq_mean(g, y)
        })?);
    }
    entries.push(run("op.upsample_nearest_2x", pair_block(116, &[1, 2, 3, 3]), |g, b| {
        let a = g.param(b, "a");
        let y = g.upsample_nearest_2x(a);
        sq_mean(g, y)
    })?);
    entries.push(run("op.global_avg_pool", pair_block(117, &[2, 3, 4, 4]), |g, b| {
        let a = g.param(b, "a");
        let y = g.global_avg_pool(a);
        sq_mean(g, y)
    })?);
    {
        let mut rng = SeededRng::new(118);
        let mut block = ParamBlock::new();
        block.insert("x", rng.normal_tensor([2, 4, 3, 3]));
        block.insert("gamma", rng.uniform_tensor([4], 0.5, 1.5));
        block.insert("beta", rng.normal_tensor([4]));
        entries.push(run("op.group_norm", block, |g, b| {
            let (x, gamma, beta) = (g.param(b, "x"), g.param(b, "gamma"), g.param(b, "beta"));
            let y = g.group_norm(x, gamma, beta, 2);
            sq_mean(g, y)
        })?);
    }
    {
        let mut rng = SeededRng::new(119);
        let mut block = ParamBlock::new();
        block.insert("table", rng.normal_tensor([5, 6]));
        entries.push(run("op.embedding", block, |g, b| {
            let t = g.param(b, "table");
            let y = g.embedding(t, &[0, 2, 2, 4]);
            sq_mean(g, y)
        })?);
    }

    // ── Reductions and losses ───────────────────────────────────────────
    entries.push(run("op.sum_all", pair_block(120, &[3, 3]), |g, b| {
        let a = g.param(b, "a");
        let m = g.mul(a, a);
        g.sum_all(m)
    })?);
    entries.push(run("op.mean_all", pair_block(121, &[3, 3]), |g, b| {
        let a = g.param(b, "a");
        let m = g.mul(a, a);
        g.mean_all(m)
    })?);
    entries.push(run("loss.cross_entropy", pair_block(122, &[4, 5]), |g, b| {
        let a = g.param(b, "a");
        loss_ce_node(g, a, &[0, 3, 2, 4])
    })?);
    entries.push(run("loss.outlier_exposure", pair_block(123, &[3, 4]), |g, b| {
        let a = g.param(b, "a");
        loss_oe_node(g, a)
    })?);

    // ── Layer and model composites ──────────────────────────────────────
    {
        let mut rng = SeededRng::new(130);
        let mut block = ParamBlock::new();
        let l1 = Linear::init(&mut block, "l1", 4, 6, &mut rng);
        let l2 = Linear::init(&mut block, "l2", 6, 2, &mut rng);
        let x = rng.normal_tensor([3, 4]);
        entries.push(run("layer.linear_stack", block, move |g, b| {
            let xin = g.input(&x);
            let h = l1.forward(g, b, xin);
            let h = g.tanh(h);
            let y = l2.forward(g, b, h);
            sq_mean(g, y)
        })?);
    }
    {
        let mut rng = SeededRng::new(131);
        let cfg = DenoiserConfig {
            in_channels: 2,
            base_channels: 4,
            levels: 1,
            cond_dim: 8,
            groups: 2,
        };
        let den = Denoiser::init(cfg, Vocabulary::new(vec![1, 2]).unwrap(), &mut rng).unwrap();
        let z = rng.normal_tensor([2, 2, 4, 4]);
        let block = den.params.clone();
        entries.push(run("model.denoiser", block, move |g, b| {
            let zin = g.input(&z);
            let pred = den
                .forward_in(g, b, zin, &[3, 7], &[Some(1), None])
                .expect("validated suite inputs");
            sq_mean(g, pred)
        })?);
    }
    {
        let mut rng = SeededRng::new(132);
        let cfg = DetectorConfig {
            in_channels: 3,
            num_classes: 3,
            widths: [4, 4, 8],
            feature_dim: 8,
            groups: 2,
        };
        let model = DetectorModel::init(cfg, &mut rng).unwrap();
        let x = rng.uniform_tensor([2, 3, 8, 8], 0.0, 1.0);
        let block = model.params.clone();
        entries.push(run("model.detector_ce", block, move |g, b| {
            let xin = g.input(&x);
            let f = model.features_in(g, b, xin);
            let logits = model.head_in(g, b, f);
            loss_ce_node(g, logits, &[0, 2])
        })?);
    }
    {
        // Variational head: likelihood and contrastive estimate together.
        let mut rng = SeededRng::new(133);
        let q = crate::detector::ClubHead::init(6, &mut rng);
        let x = rng.normal_tensor([4, 6]);
        let y = rng.normal_tensor([4, 6]);
        let block = q.params.clone();
        entries.push(run("model.club_head", block, move |g, b| {
            let xin = g.input(&x);
            let yin = g.input(&y);
            let (mu, lv) = q.forward_in(g, b, xin, false);
            let nll = club_q_nll_node(g, mu, lv, yin);
            let est = club_estimate_node(g, mu, lv, yin);
            g.add(nll, est)
        })?);
    }
    {
        // Gradient flow through a frozen variational head into the encoder.
        let mut rng = SeededRng::new(134);
        let cfg = DetectorConfig {
            in_channels: 3,
            num_classes: 2,
            widths: [4, 4, 4],
            feature_dim: 6,
            groups: 2,
        };
        let model = DetectorModel::init(cfg, &mut rng).unwrap();
        let x_src = rng.uniform_tensor([3, 3, 8, 8], 0.0, 1.0);
        let x_out = rng.uniform_tensor([3, 3, 8, 8], 0.0, 1.0);
        let block = model.params.clone();
        entries.push(run("model.encoder_through_frozen_club", block, move |g, b| {
            let src = g.input(&x_src);
            let out = g.input(&x_out);
            let f_src = model.features_in(g, b, src);
            let f_out = model.features_in(g, b, out);
            let (mu, lv) = model.club.forward(g, f_src, true);
            club_estimate_node(g, mu, lv, f_out)
        })?);
    }

    Ok(entries)
}
