//! Trainable building blocks: dense, convolution, normalization, embedding.
//!
//! A layer struct owns no tensors — it records the parameter names it
//! registered in a [`ParamBlock`] plus its static hyperparameters, and knows
//! how to apply itself to a graph node. This keeps all state in the block
//! (one place to checkpoint, one place to optimize) while layers stay `Copy`-
//! cheap descriptions.

use super::graph::{Graph, NodeId};
use super::params::ParamBlock;
use super::scalar::Scalar;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

fn kaiming_uniform(rng: &mut SeededRng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    rng.uniform_tensor(shape, -bound, bound)
}

/// Fully-connected layer `[n,in] -> [n,out]`.
///
/// The weight is stored `[in, out]` so the forward pass is a single
/// `x @ w` without a transpose.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(
        block: &mut ParamBlock,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut SeededRng,
    ) -> Linear {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        block.insert(&weight, kaiming_uniform(rng, vec![in_dim, out_dim], in_dim));
        block.insert(&bias, Tensor::zeros([out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, block: &ParamBlock, x: NodeId) -> NodeId {
        let w = g.param(block, &self.weight);
        let b = g.param(block, &self.bias);
        let xw = g.matmul(x, w);
        g.add_row_vec(xw, b)
    }
}

/// Square-kernel 2-d convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn init(
        block: &mut ParamBlock,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut SeededRng,
    ) -> Conv2d {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        let fan_in = in_channels * kernel * kernel;
        block.insert(
            &weight,
            kaiming_uniform(rng, vec![out_channels, in_channels, kernel, kernel], fan_in),
        );
        block.insert(&bias, Tensor::zeros([out_channels]));
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, block: &ParamBlock, x: NodeId) -> NodeId {
        let w = g.param(block, &self.weight);
        let b = g.param(block, &self.bias);
        let y = g.conv2d(x, w, self.stride, self.pad);
        g.add_channel_bias(y, b)
    }
}

/// Group normalization with learned per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: String,
    pub beta: String,
    pub groups: usize,
}

impl GroupNorm {
    pub fn init(block: &mut ParamBlock, name: &str, channels: usize, groups: usize) -> GroupNorm {
        assert!(
            groups >= 1 && channels % groups == 0,
            "groups {groups} must divide channels {channels}"
        );
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        block.insert(&gamma, Tensor::full([channels], 1.0));
        block.insert(&beta, Tensor::zeros([channels]));
        GroupNorm {
            gamma,
            beta,
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, block: &ParamBlock, x: NodeId) -> NodeId {
        let gamma = g.param(block, &self.gamma);
        let beta = g.param(block, &self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// Learned lookup table `[vocab, dim]`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn init(
        block: &mut ParamBlock,
        name: &str,
        vocab: usize,
        dim: usize,
        scale: f32,
        rng: &mut SeededRng,
    ) -> Embedding {
        let table = format!("{name}.table");
        let t = rng.normal_tensor([vocab, dim]).map(|v| v * scale);
        block.insert(&table, t);
        Embedding {
            table,
            vocab,
            dim,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        block: &ParamBlock,
        indices: &[usize],
    ) -> NodeId {
        let t = g.param(block, &self.table);
        g.embedding(t, indices)
    }
}
