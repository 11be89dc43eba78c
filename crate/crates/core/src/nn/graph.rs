//! Reverse-mode differentiable computation graph.
//!
//! A [`Graph`] is a Wengert list built eagerly: each op computes its value at
//! construction time and records what it needs for the vector-Jacobian
//! product. [`Graph::backward`] walks the list in reverse, accumulating
//! gradients for every node that (transitively) depends on a parameter.
//!
//! Shape mismatches are programmer errors and panic with a message; numeric
//! problems (a non-finite value anywhere in the forward pass or in a
//! gradient) are runtime conditions and surface as [`Error::Numeric`] naming
//! the op that produced the first offending buffer.
//!
//! Determinism: every loop below runs in a fixed order and all reductions
//! accumulate sequentially (`f64` accumulators for full reductions), so a
//! graph evaluated twice over identical inputs produces bit-identical values
//! and gradients.

use super::params::ParamBlock;
use super::scalar::{sigmoid, Scalar};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Internal value buffer at the graph's working precision.
#[derive(Debug, Clone)]
pub(crate) struct Buf<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Buf<T> {
    fn zeros(shape: Vec<usize>) -> Buf<T> {
        let n = shape.iter().product();
        Buf {
            shape,
            data: vec![T::ZERO; n],
        }
    }

    fn from_tensor(t: &Tensor) -> Buf<T> {
        Buf {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| T::from_f32(v)).collect(),
        }
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|&v| v.to_f32()).collect(),
        )
    }

    fn len(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param { block: u64, index: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    AddRowVec(NodeId, NodeId),
    MulRowVec(NodeId, NodeId),
    ColSum(NodeId),
    AddChannelBias(NodeId, NodeId),
    AddSampleChannel(NodeId, NodeId),
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    UpsampleNearest2x(NodeId),
    GlobalAvgPool(NodeId),
    Relu(NodeId),
    Silu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize },
    Embedding { table: NodeId, indices: Vec<usize> },
    SumAll(NodeId),
    MeanAll(NodeId),
    LogSoftmaxRows(NodeId),
    PickNegMean { x: NodeId, labels: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param { .. } => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::AddRowVec(..) => "add_row_vec",
            Op::MulRowVec(..) => "mul_row_vec",
            Op::ColSum(..) => "col_sum",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::AddSampleChannel(..) => "add_sample_channel",
            Op::Conv2d { .. } => "conv2d",
            Op::UpsampleNearest2x(..) => "upsample_nearest_2x",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Relu(..) => "relu",
            Op::Silu(..) => "silu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::GroupNorm { .. } => "group_norm",
            Op::Embedding { .. } => "embedding",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::PickNegMean { .. } => "pick_neg_mean",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Input | Op::Param { .. } => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddRowVec(a, b)
            | Op::MulRowVec(a, b)
            | Op::AddChannelBias(a, b)
            | Op::AddSampleChannel(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::ColSum(a)
            | Op::UpsampleNearest2x(a)
            | Op::GlobalAvgPool(a)
            | Op::Relu(a)
            | Op::Silu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::LogSoftmaxRows(a) => vec![a],
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::GroupNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Embedding { table, .. } => vec![table],
            Op::PickNegMean { x, .. } => vec![x],
        }
    }
}

/// Per-node extra state saved at forward time for the backward pass.
enum Aux<T> {
    None,
    /// Per-(sample, group) statistics: mean and 1/sqrt(var + eps).
    Norm { mean: Vec<T>, istd: Vec<T> },
}

struct Node<T> {
    op: Op,
    value: Buf<T>,
    needs_grad: bool,
    aux: Aux<T>,
}

/// Epsilon inside the normalization denominator.
const NORM_EPS: f64 = 1e-5;

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Buf<T>>>,
    param_cache: HashMap<(u64, usize), NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Graph<T> {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    fn push(&mut self, op: Op, value: Buf<T>, needs_grad: bool, aux: Aux<T>) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            aux,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn buf(&self, id: NodeId) -> &Buf<T> {
        &self.nodes[id.0].value
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    /// Copy a node's value out as an `f32` tensor.
    pub fn value(&self, id: NodeId) -> Tensor {
        self.buf(id).to_tensor()
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let b = self.buf(id);
        assert_eq!(b.len(), 1, "scalar_value on non-scalar node");
        b.data[0].to_f64()
    }

    /// Gradient accumulated for `id` by the last `backward` call, if any.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref()).map(Buf::to_tensor)
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Constant leaf (no gradient flows into it).
    pub fn input(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Input, Buf::from_tensor(t), false, Aux::None)
    }

    /// Parameter leaf. Repeated registration of the same parameter returns
    /// the same node, so its gradient accumulates in one place.
    pub fn param(&mut self, block: &ParamBlock, name: &str) -> NodeId {
        let index = block
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let key = (block.id(), index);
        if let Some(&id) = self.param_cache.get(&key) {
            return id;
        }
        let id = self.push(
            Op::Param {
                block: block.id(),
                index,
            },
            Buf::from_tensor(block.value_at(index)),
            true,
            Aux::None,
        );
        self.param_cache.insert(key, id);
        id
    }

    // ── Elementwise and broadcast ops ──────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.buf(a), self.buf(b));
        assert_eq!(va.shape, vb.shape, "add shapes {:?} vs {:?}", va.shape, vb.shape);
        let data = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Buf {
            shape: va.shape.clone(),
            data,
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), value, ng, Aux::None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.buf(a), self.buf(b));
        assert_eq!(va.shape, vb.shape, "sub shapes {:?} vs {:?}", va.shape, vb.shape);
        let data = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Buf {
            shape: va.shape.clone(),
            data,
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), value, ng, Aux::None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.buf(a), self.buf(b));
        assert_eq!(va.shape, vb.shape, "mul shapes {:?} vs {:?}", va.shape, vb.shape);
        let data = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Buf {
            shape: va.shape.clone(),
            data,
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), value, ng, Aux::None)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let f = T::from_f64(factor);
        let va = self.buf(a);
        let value = Buf {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| x * f).collect(),
        };
        let ng = self.needs(a);
        self.push(Op::Scale(a, factor), value, ng, Aux::None)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.buf(a);
        let value = Buf {
            shape: va.shape.clone(),
            data: va
                .data
                .iter()
                .map(|&x| if x > T::ZERO { x } else { T::ZERO })
                .collect(),
        };
        let ng = self.needs(a);
        self.push(Op::Relu(a), value, ng, Aux::None)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let va = self.buf(a);
        let value = Buf {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| x * sigmoid(x)).collect(),
        };
        let ng = self.needs(a);
        self.push(Op::Silu(a), value, ng, Aux::None)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let va = self.buf(a);
        let value = Buf {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| x.tanh()).collect(),
        };
        let ng = self.needs(a);
        self.push(Op::Tanh(a), value, ng, Aux::None)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let va = self.buf(a);
        let value = Buf {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| x.exp()).collect(),
        };
        let ng = self.needs(a);
        self.push(Op::Exp(a), value, ng, Aux::None)
    }

    // ── Matrix / row-vector ops ─────────────────────────────────────────

    /// `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.buf(a), self.buf(b));
        assert_eq!(va.shape.len(), 2, "matmul lhs must be 2-d");
        assert_eq!(vb.shape.len(), 2, "matmul rhs must be 2-d");
        let (m, k) = (va.shape[0], va.shape[1]);
        let (k2, n) = (vb.shape[0], vb.shape[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = Buf::zeros(vec![m, n]);
        T::gemm(
            m, k, n,
            T::ONE,
            &va.data, k as isize, 1,
            &vb.data, n as isize, 1,
            T::ZERO,
            &mut out.data, n as isize, 1,
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), out, ng, Aux::None)
    }

    /// `[n,d] + [d]`, broadcasting the vector over rows.
    pub fn add_row_vec(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (vx, vv) = (self.buf(x), self.buf(v));
        assert_eq!(vx.shape.len(), 2, "add_row_vec lhs must be 2-d");
        let d = vx.shape[1];
        assert_eq!(vv.shape, vec![d], "add_row_vec vector shape");
        let mut data = vx.data.clone();
        for row in data.chunks_mut(d) {
            for (dst, &s) in row.iter_mut().zip(&vv.data) {
                *dst += s;
            }
        }
        let value = Buf {
            shape: vx.shape.clone(),
            data,
        };
        let ng = self.needs(x) || self.needs(v);
        self.push(Op::AddRowVec(x, v), value, ng, Aux::None)
    }

    /// `[n,d] * [d]`, broadcasting the vector over rows.
    pub fn mul_row_vec(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (vx, vv) = (self.buf(x), self.buf(v));
        assert_eq!(vx.shape.len(), 2, "mul_row_vec lhs must be 2-d");
        let d = vx.shape[1];
        assert_eq!(vv.shape, vec![d], "mul_row_vec vector shape");
        let mut data = vx.data.clone();
        for row in data.chunks_mut(d) {
            for (dst, &s) in row.iter_mut().zip(&vv.data) {
                *dst = *dst * s;
            }
        }
        let value = Buf {
            shape: vx.shape.clone(),
            data,
        };
        let ng = self.needs(x) || self.needs(v);
        self.push(Op::MulRowVec(x, v), value, ng, Aux::None)
    }

    /// Column sums of a `[n,d]` matrix: output `[d]`.
    pub fn col_sum(&mut self, x: NodeId) -> NodeId {
        let vx = self.buf(x);
        assert_eq!(vx.shape.len(), 2, "col_sum input must be 2-d");
        let (n, d) = (vx.shape[0], vx.shape[1]);
        let mut acc = vec![0.0f64; d];
        for i in 0..n {
            for j in 0..d {
                acc[j] += vx.data[i * d + j].to_f64();
            }
        }
        let value = Buf {
            shape: vec![d],
            data: acc.into_iter().map(T::from_f64).collect(),
        };
        let ng = self.needs(x);
        self.push(Op::ColSum(x), value, ng, Aux::None)
    }

    // ── Image-shaped ops (NCHW) ─────────────────────────────────────────

    /// `[n,c,h,w] + [c]` per-channel bias.
    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (vx, vb) = (self.buf(x), self.buf(b));
        assert_eq!(vx.shape.len(), 4, "add_channel_bias input must be 4-d");
        let c = vx.shape[1];
        assert_eq!(vb.shape, vec![c], "add_channel_bias bias shape");
        let hw: usize = vx.shape[2] * vx.shape[3];
        let mut data = vx.data.clone();
        for sample in data.chunks_mut(c * hw) {
            for (ch, plane) in sample.chunks_mut(hw).enumerate() {
                let bias = vb.data[ch];
                for v in plane {
                    *v += bias;
                }
            }
        }
        let value = Buf {
            shape: vx.shape.clone(),
            data,
        };
        let ng = self.needs(x) || self.needs(b);
        self.push(Op::AddChannelBias(x, b), value, ng, Aux::None)
    }

    /// `[n,c,h,w] + [n,c]`: a per-sample, per-channel offset broadcast over
    /// space. Used to inject timestep/condition embeddings into feature maps.
    pub fn add_sample_channel(&mut self, x: NodeId, e: NodeId) -> NodeId {
        let (vx, ve) = (self.buf(x), self.buf(e));
        assert_eq!(vx.shape.len(), 4, "add_sample_channel input must be 4-d");
        let (n, c) = (vx.shape[0], vx.shape[1]);
        assert_eq!(ve.shape, vec![n, c], "add_sample_channel offsets shape");
        let hw: usize = vx.shape[2] * vx.shape[3];
        let mut data = vx.data.clone();
        for (i, sample) in data.chunks_mut(c * hw).enumerate() {
            for (ch, plane) in sample.chunks_mut(hw).enumerate() {
                let bias = ve.data[i * c + ch];
                for v in plane {
                    *v += bias;
                }
            }
        }
        let value = Buf {
            shape: vx.shape.clone(),
            data,
        };
        let ng = self.needs(x) || self.needs(e);
        self.push(Op::AddSampleChannel(x, e), value, ng, Aux::None)
    }

    /// 2-d convolution: input `[n,cin,h,w]`, weights `[cout,cin,kh,kw]`.
    /// Zero padding `pad` on all sides, square stride. Bias is applied
    /// separately via [`Graph::add_channel_bias`].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        assert!(stride >= 1, "conv2d stride must be >= 1");
        let (vx, vw) = (self.buf(x), self.buf(w));
        assert_eq!(vx.shape.len(), 4, "conv2d input must be 4-d");
        assert_eq!(vw.shape.len(), 4, "conv2d weights must be 4-d");
        let (n, cin, h, wdt) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let (cout, cin2, kh, kw) = (vw.shape[0], vw.shape[1], vw.shape[2], vw.shape[3]);
        assert_eq!(cin, cin2, "conv2d channel mismatch {cin} vs {cin2}");
        assert!(
            h + 2 * pad >= kh && wdt + 2 * pad >= kw,
            "conv2d kernel larger than padded input"
        );
        let hout = (h + 2 * pad - kh) / stride + 1;
        let wout = (wdt + 2 * pad - kw) / stride + 1;
        let k = cin * kh * kw;
        let l = hout * wout;
        let geo = ConvGeometry {
            cin, h, w: wdt, kh, kw, stride, pad, hout, wout,
        };
        let mut out = Buf::zeros(vec![n, cout, hout, wout]);
        let mut cols = vec![T::ZERO; k * l];
        for i in 0..n {
            im2col(&vx.data[i * cin * h * wdt..(i + 1) * cin * h * wdt], &geo, &mut cols);
            T::gemm(
                cout, k, l,
                T::ONE,
                &vw.data, k as isize, 1,
                &cols, l as isize, 1,
                T::ZERO,
                &mut out.data[i * cout * l..(i + 1) * cout * l], l as isize, 1,
            );
        }
        let ng = self.needs(x) || self.needs(w);
        self.push(Op::Conv2d { x, w, stride, pad }, out, ng, Aux::None)
    }

    /// Nearest-neighbour 2x upsampling of `[n,c,h,w]`.
    pub fn upsample_nearest_2x(&mut self, x: NodeId) -> NodeId {
        let vx = self.buf(x);
        assert_eq!(vx.shape.len(), 4, "upsample input must be 4-d");
        let (n, c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let (h2, w2) = (h * 2, w * 2);
        let mut out = Buf::zeros(vec![n, c, h2, w2]);
        for nc in 0..n * c {
            let src = &vx.data[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out.data[nc * h2 * w2..(nc + 1) * h2 * w2];
            for y in 0..h {
                for x_ in 0..w {
                    let v = src[y * w + x_];
                    let base = (2 * y) * w2 + 2 * x_;
                    dst[base] = v;
                    dst[base + 1] = v;
                    dst[base + w2] = v;
                    dst[base + w2 + 1] = v;
                }
            }
        }
        let ng = self.needs(x);
        self.push(Op::UpsampleNearest2x(x), out, ng, Aux::None)
    }

    /// Spatial mean of `[n,c,h,w]` down to `[n,c]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let vx = self.buf(x);
        assert_eq!(vx.shape.len(), 4, "global_avg_pool input must be 4-d");
        let (n, c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let hw = h * w;
        let mut out = Buf::zeros(vec![n, c]);
        for nc in 0..n * c {
            let mut acc = 0.0f64;
            for &v in &vx.data[nc * hw..(nc + 1) * hw] {
                acc += v.to_f64();
            }
            out.data[nc] = T::from_f64(acc / hw as f64);
        }
        let ng = self.needs(x);
        self.push(Op::GlobalAvgPool(x), out, ng, Aux::None)
    }

    /// Group normalization over `[n,c,h,w]` with affine per-channel scale and
    /// shift. `groups` must divide the channel count.
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> NodeId {
        let (vx, vg, vb) = (self.buf(x), self.buf(gamma), self.buf(beta));
        assert_eq!(vx.shape.len(), 4, "group_norm input must be 4-d");
        let (n, c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        assert!(groups >= 1 && c % groups == 0, "groups {groups} must divide channels {c}");
        assert_eq!(vg.shape, vec![c], "group_norm gamma shape");
        assert_eq!(vb.shape, vec![c], "group_norm beta shape");
        let gsz = (c / groups) * h * w;
        let mut out = Buf::zeros(vx.shape.clone());
        let mut means = Vec::with_capacity(n * groups);
        let mut istds = Vec::with_capacity(n * groups);
        for i in 0..n {
            for g in 0..groups {
                let start = i * c * h * w + g * gsz;
                let slice = &vx.data[start..start + gsz];
                let mut acc = 0.0f64;
                for &v in slice {
                    acc += v.to_f64();
                }
                let mean = acc / gsz as f64;
                let mut var = 0.0f64;
                for &v in slice {
                    let d = v.to_f64() - mean;
                    var += d * d;
                }
                var /= gsz as f64;
                let istd = 1.0 / (var + NORM_EPS).sqrt();
                let (mean_t, istd_t) = (T::from_f64(mean), T::from_f64(istd));
                means.push(mean_t);
                istds.push(istd_t);
                let cpg = c / groups;
                for cc in 0..cpg {
                    let ch = g * cpg + cc;
                    let (ga, be) = (vg.data[ch], vb.data[ch]);
                    for p in 0..h * w {
                        let idx = start + cc * h * w + p;
                        out.data[idx] = ga * ((vx.data[idx] - mean_t) * istd_t) + be;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Op::GroupNorm { x, gamma, beta, groups },
            out,
            ng,
            Aux::Norm { mean: means, istd: istds },
        )
    }

    /// Row lookup: `table[v,e]` gathered at `indices` into `[len,e]`.
    pub fn embedding(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let vt = self.buf(table);
        assert_eq!(vt.shape.len(), 2, "embedding table must be 2-d");
        let (v, e) = (vt.shape[0], vt.shape[1]);
        for &ix in indices {
            assert!(ix < v, "embedding index {ix} out of vocabulary {v}");
        }
        let mut out = Buf::zeros(vec![indices.len(), e]);
        for (row, &ix) in indices.iter().enumerate() {
            out.data[row * e..(row + 1) * e].copy_from_slice(&vt.data[ix * e..(ix + 1) * e]);
        }
        let ng = self.needs(table);
        self.push(
            Op::Embedding { table, indices: indices.to_vec() },
            out,
            ng,
            Aux::None,
        )
    }

    // ── Reductions and losses ───────────────────────────────────────────

    /// Sum of all elements (f64 accumulation), output shape `[1]`.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let vx = self.buf(x);
        let mut acc = 0.0f64;
        for &v in &vx.data {
            acc += v.to_f64();
        }
        let value = Buf {
            shape: vec![1],
            data: vec![T::from_f64(acc)],
        };
        let ng = self.needs(x);
        self.push(Op::SumAll(x), value, ng, Aux::None)
    }

    /// Mean of all elements (f64 accumulation), output shape `[1]`.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let vx = self.buf(x);
        assert!(!vx.data.is_empty(), "mean_all of empty tensor");
        let mut acc = 0.0f64;
        for &v in &vx.data {
            acc += v.to_f64();
        }
        let value = Buf {
            shape: vec![1],
            data: vec![T::from_f64(acc / vx.len() as f64)],
        };
        let ng = self.needs(x);
        self.push(Op::MeanAll(x), value, ng, Aux::None)
    }

    /// Row-wise log-softmax of `[n,c]` logits (max-shifted, f64 accumulation).
    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let vx = self.buf(x);
        assert_eq!(vx.shape.len(), 2, "log_softmax input must be 2-d");
        let (n, c) = (vx.shape[0], vx.shape[1]);
        assert!(c >= 1, "log_softmax over zero classes");
        let mut out = Buf::zeros(vec![n, c]);
        for i in 0..n {
            let row = &vx.data[i * c..(i + 1) * c];
            let max = row
                .iter()
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()));
            let mut acc = 0.0f64;
            for &v in row {
                acc += (v.to_f64() - max).exp();
            }
            let lse = max + acc.ln();
            for j in 0..c {
                out.data[i * c + j] = T::from_f64(row[j].to_f64() - lse);
            }
        }
        let ng = self.needs(x);
        self.push(Op::LogSoftmaxRows(x), out, ng, Aux::None)
    }

    /// `-(1/n) * sum_i x[i, labels[i]]` — cross-entropy when `x` holds row
    /// log-probabilities. Output shape `[1]`.
    pub fn pick_neg_mean(&mut self, x: NodeId, labels: &[usize]) -> NodeId {
        let vx = self.buf(x);
        assert_eq!(vx.shape.len(), 2, "pick_neg_mean input must be 2-d");
        let (n, c) = (vx.shape[0], vx.shape[1]);
        assert_eq!(labels.len(), n, "one label per row required");
        for &y in labels {
            assert!(y < c, "label {y} out of range for {c} classes");
        }
        let mut acc = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            acc += vx.data[i * c + y].to_f64();
        }
        let value = Buf {
            shape: vec![1],
            data: vec![T::from_f64(-acc / n as f64)],
        };
        let ng = self.needs(x);
        self.push(
            Op::PickNegMean { x, labels: labels.to_vec() },
            value,
            ng,
            Aux::None,
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Validate every forward value for finiteness and return the scalar
    /// value of `loss` without running the gradient sweep.
    pub fn eval_checked(&self, loss: NodeId) -> Result<f64> {
        assert_eq!(self.buf(loss).len(), 1, "loss must be scalar");
        self.validate_values()?;
        Ok(self.scalar_value(loss))
    }

    fn validate_values(&self) -> Result<()> {
        for node in &self.nodes {
            if let Some(pos) = node.value.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(
                    node.op.name(),
                    format!(
                        "forward value {:?} at flat index {pos}",
                        node.value.data[pos]
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar loss node.
    ///
    /// Validates every forward value, seeds the loss gradient with 1, walks
    /// the node list in reverse accumulating vector-Jacobian products, and
    /// validates every produced gradient. Returns the loss value.
    ///
    /// Gradients land in the graph; move them into parameter blocks with
    /// [`Graph::accumulate_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<f64> {
        assert_eq!(self.buf(loss).len(), 1, "loss must be scalar");
        self.validate_values()?;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Buf {
            shape: vec![1],
            data: vec![T::ONE],
        });
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            // Keep the gradient available for callers inspecting leaves or
            // intermediate nodes after the sweep.
            let deltas = self.vjp(idx, &g)?;
            self.grads[idx] = Some(g);
            for (pid, delta) in deltas {
                if let Some(pos) = delta.data.iter().position(|v| !v.is_finite()) {
                    return Err(Error::numeric(
                        self.nodes[idx].op.name(),
                        format!("gradient value {:?} at flat index {pos}", delta.data[pos]),
                    ));
                }
                accumulate(&mut self.grads, pid, delta);
            }
        }
        Ok(self.scalar_value(loss))
    }

    /// Add this graph's parameter gradients into the matching block's
    /// gradient slots. Parameters belonging to other blocks are untouched.
    pub fn accumulate_grads(&self, block: &mut ParamBlock) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let Op::Param { block: bid, index } = node.op {
                if bid == block.id() {
                    if let Some(g) = grad {
                        block.accumulate_grad_at(index, &g.to_tensor());
                    }
                }
            }
        }
    }

    /// Vector-Jacobian product: gradients flowing from node `idx` (with
    /// output gradient `g`) into each parent that requires one.
    fn vjp(&self, idx: usize, g: &Buf<T>) -> Result<Vec<(NodeId, Buf<T>)>> {
        let node = &self.nodes[idx];
        let mut out: Vec<(NodeId, Buf<T>)> = Vec::new();
        let parents = node.op.parents();
        let wants: Vec<bool> = parents.iter().map(|&p| self.needs(p)).collect();
        if !wants.iter().any(|&w| w) {
            return Ok(out);
        }
        match node.op {
            Op::Input | Op::Param { .. } => {}
            Op::Add(a, b) => {
                if wants[0] {
                    out.push((a, g.clone()));
                }
                if wants[1] {
                    out.push((b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if wants[0] {
                    out.push((a, g.clone()));
                }
                if wants[1] {
                    let mut d = g.clone();
                    for v in &mut d.data {
                        *v = -*v;
                    }
                    out.push((b, d));
                }
            }
            Op::Mul(a, b) => {
                if wants[0] {
                    let vb = self.buf(b);
                    let mut d = g.clone();
                    for (v, &s) in d.data.iter_mut().zip(&vb.data) {
                        *v = *v * s;
                    }
                    out.push((a, d));
                }
                if wants[1] {
                    let va = self.buf(a);
                    let mut d = g.clone();
                    for (v, &s) in d.data.iter_mut().zip(&va.data) {
                        *v = *v * s;
                    }
                    out.push((b, d));
                }
            }
            Op::Scale(a, factor) => {
                if wants[0] {
                    let f = T::from_f64(factor);
                    let mut d = g.clone();
                    for v in &mut d.data {
                        *v = *v * f;
                    }
                    out.push((a, d));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.buf(a), self.buf(b));
                let (m, k) = (va.shape[0], va.shape[1]);
                let n = vb.shape[1];
                if wants[0] {
                    // dA = g @ B^T
                    let mut d = Buf::zeros(va.shape.clone());
                    T::gemm(
                        m, n, k,
                        T::ONE,
                        &g.data, n as isize, 1,
                        &vb.data, 1, n as isize,
                        T::ZERO,
                        &mut d.data, k as isize, 1,
                    );
                    out.push((a, d));
                }
                if wants[1] {
                    // dB = A^T @ g
                    let mut d = Buf::zeros(vb.shape.clone());
                    T::gemm(
                        k, m, n,
                        T::ONE,
                        &va.data, 1, k as isize,
                        &g.data, n as isize, 1,
                        T::ZERO,
                        &mut d.data, n as isize, 1,
                    );
                    out.push((b, d));
                }
            }
            Op::AddRowVec(x, v) => {
                if wants[0] {
                    out.push((x, g.clone()));
                }
                if wants[1] {
                    let d = self.buf(v).shape[0];
                    let mut acc = vec![0.0f64; d];
                    for row in g.data.chunks(d) {
                        for (a, &gv) in acc.iter_mut().zip(row) {
                            *a += gv.to_f64();
                        }
                    }
                    out.push((
                        v,
                        Buf {
                            shape: vec![d],
                            data: acc.into_iter().map(T::from_f64).collect(),
                        },
                    ));
                }
            }
            Op::MulRowVec(x, v) => {
                let vv = self.buf(v);
                let d = vv.shape[0];
                if wants[0] {
                    let mut dx = g.clone();
                    for row in dx.data.chunks_mut(d) {
                        for (gv, &s) in row.iter_mut().zip(&vv.data) {
                            *gv = *gv * s;
                        }
                    }
                    out.push((x, dx));
                }
                if wants[1] {
                    let vx = self.buf(x);
                    let mut acc = vec![0.0f64; d];
                    for (grow, xrow) in g.data.chunks(d).zip(vx.data.chunks(d)) {
                        for j in 0..d {
                            acc[j] += grow[j].to_f64() * xrow[j].to_f64();
                        }
                    }
                    out.push((
                        v,
                        Buf {
                            shape: vec![d],
                            data: acc.into_iter().map(T::from_f64).collect(),
                        },
                    ));
                }
            }
            Op::ColSum(x) => {
                if wants[0] {
                    let vx = self.buf(x);
                    let (n, d) = (vx.shape[0], vx.shape[1]);
                    let mut dx = Buf::zeros(vx.shape.clone());
                    for i in 0..n {
                        dx.data[i * d..(i + 1) * d].copy_from_slice(&g.data);
                    }
                    out.push((x, dx));
                }
            }
            Op::AddChannelBias(x, b) => {
                if wants[0] {
                    out.push((x, g.clone()));
                }
                if wants[1] {
                    let vx = self.buf(x);
                    let (n, c) = (vx.shape[0], vx.shape[1]);
                    let hw = vx.shape[2] * vx.shape[3];
                    let mut acc = vec![0.0f64; c];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            for p in 0..hw {
                                acc[ch] += g.data[base + p].to_f64();
                            }
                        }
                    }
                    out.push((
                        b,
                        Buf {
                            shape: vec![c],
                            data: acc.into_iter().map(T::from_f64).collect(),
                        },
                    ));
                }
            }
            Op::AddSampleChannel(x, e) => {
                if wants[0] {
                    out.push((x, g.clone()));
                }
                if wants[1] {
                    let vx = self.buf(x);
                    let (n, c) = (vx.shape[0], vx.shape[1]);
                    let hw = vx.shape[2] * vx.shape[3];
                    let mut de = Buf::zeros(vec![n, c]);
                    for nc in 0..n * c {
                        let mut acc = 0.0f64;
                        for p in 0..hw {
                            acc += g.data[nc * hw + p].to_f64();
                        }
                        de.data[nc] = T::from_f64(acc);
                    }
                    out.push((e, de));
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (vx, vw) = (self.buf(x), self.buf(w));
                let (n, cin, h, wdt) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
                let (cout, _, kh, kw) = (vw.shape[0], vw.shape[1], vw.shape[2], vw.shape[3]);
                let geo = ConvGeometry {
                    cin, h, w: wdt, kh, kw, stride, pad,
                    hout: (h + 2 * pad - kh) / stride + 1,
                    wout: (wdt + 2 * pad - kw) / stride + 1,
                };
                let k = cin * kh * kw;
                let l = geo.hout * geo.wout;
                let mut cols = vec![T::ZERO; k * l];
                let mut dw = if wants[1] {
                    Some(Buf::zeros(vw.shape.clone()))
                } else {
                    None
                };
                let mut dx = if wants[0] {
                    Some(Buf::zeros(vx.shape.clone()))
                } else {
                    None
                };
                let mut dcols = vec![T::ZERO; k * l];
                for i in 0..n {
                    let gslice = &g.data[i * cout * l..(i + 1) * cout * l];
                    if let Some(dw) = dw.as_mut() {
                        im2col(&vx.data[i * cin * h * wdt..(i + 1) * cin * h * wdt], &geo, &mut cols);
                        // dW += g_i @ cols^T
                        T::gemm(
                            cout, l, k,
                            T::ONE,
                            gslice, l as isize, 1,
                            &cols, 1, l as isize,
                            T::ONE,
                            &mut dw.data, k as isize, 1,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dcols = W^T @ g_i, then scatter back to image layout
                        T::gemm(
                            k, cout, l,
                            T::ONE,
                            &vw.data, 1, k as isize,
                            gslice, l as isize, 1,
                            T::ZERO,
                            &mut dcols, l as isize, 1,
                        );
                        col2im_add(
                            &dcols,
                            &geo,
                            &mut dx.data[i * cin * h * wdt..(i + 1) * cin * h * wdt],
                        );
                    }
                }
                if let Some(d) = dx {
                    out.push((x, d));
                }
                if let Some(d) = dw {
                    out.push((w, d));
                }
            }
            Op::UpsampleNearest2x(x) => {
                if wants[0] {
                    let vx = self.buf(x);
                    let (n, c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
                    let (h2, w2) = (h * 2, w * 2);
                    let mut dx = Buf::zeros(vx.shape.clone());
                    for nc in 0..n * c {
                        let gs = &g.data[nc * h2 * w2..(nc + 1) * h2 * w2];
                        let ds = &mut dx.data[nc * h * w..(nc + 1) * h * w];
                        for y in 0..h {
                            for x_ in 0..w {
                                let base = (2 * y) * w2 + 2 * x_;
                                ds[y * w + x_] =
                                    gs[base] + gs[base + 1] + gs[base + w2] + gs[base + w2 + 1];
                            }
                        }
                    }
                    out.push((x, dx));
                }
            }
            Op::GlobalAvgPool(x) => {
                if wants[0] {
                    let vx = self.buf(x);
                    let (n, c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
                    let hw = h * w;
                    let inv = T::from_f64(1.0 / hw as f64);
                    let mut dx = Buf::zeros(vx.shape.clone());
                    for nc in 0..n * c {
                        let gv = g.data[nc] * inv;
                        for p in 0..hw {
                            dx.data[nc * hw + p] = gv;
                        }
                    }
                    out.push((x, dx));
                }
            }
            Op::Relu(x) => {
                if wants[0] {
                    let vx = self.buf(x);
                    let mut dx = g.clone();
                    for (dv, &xv) in dx.data.iter_mut().zip(&vx.data) {
                        if xv <= T::ZERO {
                            *dv = T::ZERO;
                        }
                    }
                    out.push((x, dx));
                }
            }
            Op::Silu(x) => {
                if wants[0] {
                    let vx = self.buf(x);
                    let mut dx = g.clone();
                    for (dv, &xv) in dx.data.iter_mut().zip(&vx.data) {
                        let s = sigmoid(xv);
                        *dv = *dv * (s * (T::ONE + xv * (T::ONE - s)));
                    }
                    out.push((x, dx));
                }
            }
            Op::Tanh(x) => {
                if wants[0] {
                    let vy = &self.nodes[idx].value;
                    let mut dx = g.clone();
                    for (dv, &yv) in dx.data.iter_mut().zip(&vy.data) {
                        *dv = *dv * (T::ONE - yv * yv);
                    }
                    out.push((x, dx));
                }
            }
            Op::Exp(x) => {
                if wants[0] {
                    let vy = &self.nodes[idx].value;
                    let mut dx = g.clone();
                    for (dv, &yv) in dx.data.iter_mut().zip(&vy.data) {
                        *dv = *dv * yv;
                    }
                    out.push((x, dx));
                }
            }
            Op::GroupNorm { x, gamma, beta, groups } => {
                let (vx, vg) = (self.buf(x), self.buf(gamma));
                let (n, c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
                let hw = h * w;
                let cpg = c / groups;
                let gsz = cpg * hw;
                let Aux::Norm { mean, istd } = &self.nodes[idx].aux else {
                    unreachable!("group_norm node lacks saved statistics");
                };
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                let mut dx = if wants[0] {
                    Some(Buf::zeros(vx.shape.clone()))
                } else {
                    None
                };
                for i in 0..n {
                    for grp in 0..groups {
                        let start = i * c * hw + grp * gsz;
                        let (mu, is) = (mean[i * groups + grp], istd[i * groups + grp]);
                        // s1 = sum(dxhat), s2 = sum(dxhat * xhat) over the group
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for cc in 0..cpg {
                            let ch = grp * cpg + cc;
                            let ga = vg.data[ch].to_f64();
                            for p in 0..hw {
                                let idx2 = start + cc * hw + p;
                                let xv = vx.data[idx2];
                                let xhat = ((xv - mu) * is).to_f64();
                                let gv = g.data[idx2].to_f64();
                                dgamma[ch] += gv * xhat;
                                dbeta[ch] += gv;
                                let dxhat = gv * ga;
                                s1 += dxhat;
                                s2 += dxhat * xhat;
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let m = gsz as f64;
                            for cc in 0..cpg {
                                let ch = grp * cpg + cc;
                                let ga = vg.data[ch].to_f64();
                                for p in 0..hw {
                                    let idx2 = start + cc * hw + p;
                                    let xhat = ((vx.data[idx2] - mu) * is).to_f64();
                                    let dxhat = g.data[idx2].to_f64() * ga;
                                    dx.data[idx2] = T::from_f64(
                                        is.to_f64() * (dxhat - s1 / m - xhat * s2 / m),
                                    );
                                }
                            }
                        }
                    }
                }
                if let Some(d) = dx {
                    out.push((x, d));
                }
                if wants[1] {
                    out.push((
                        gamma,
                        Buf {
                            shape: vec![c],
                            data: dgamma.into_iter().map(T::from_f64).collect(),
                        },
                    ));
                }
                if wants[2] {
                    out.push((
                        beta,
                        Buf {
                            shape: vec![c],
                            data: dbeta.into_iter().map(T::from_f64).collect(),
                        },
                    ));
                }
            }
            Op::Embedding { table, ref indices } => {
                if wants[0] {
                    let vt = self.buf(table);
                    let e = vt.shape[1];
                    let mut dt = Buf::zeros(vt.shape.clone());
                    for (row, &ix) in indices.iter().enumerate() {
                        for j in 0..e {
                            dt.data[ix * e + j] += g.data[row * e + j];
                        }
                    }
                    out.push((table, dt));
                }
            }
            Op::SumAll(x) => {
                if wants[0] {
                    let vx = self.buf(x);
                    let gv = g.data[0];
                    out.push((
                        x,
                        Buf {
                            shape: vx.shape.clone(),
                            data: vec![gv; vx.len()],
                        },
                    ));
                }
            }
            Op::MeanAll(x) => {
                if wants[0] {
                    let vx = self.buf(x);
                    let gv = g.data[0] * T::from_f64(1.0 / vx.len() as f64);
                    out.push((
                        x,
                        Buf {
                            shape: vx.shape.clone(),
                            data: vec![gv; vx.len()],
                        },
                    ));
                }
            }
            Op::LogSoftmaxRows(x) => {
                if wants[0] {
                    let vy = &self.nodes[idx].value;
                    let (n, c) = (vy.shape[0], vy.shape[1]);
                    let mut dx = Buf::zeros(vy.shape.clone());
                    for i in 0..n {
                        let mut rowsum = 0.0f64;
                        for j in 0..c {
                            rowsum += g.data[i * c + j].to_f64();
                        }
                        for j in 0..c {
                            let soft = vy.data[i * c + j].to_f64().exp();
                            dx.data[i * c + j] = T::from_f64(
                                g.data[i * c + j].to_f64() - soft * rowsum,
                            );
                        }
                    }
                    out.push((x, dx));
                }
            }
            Op::PickNegMean { x, ref labels } => {
                if wants[0] {
                    let vx = self.buf(x);
                    let (n, c) = (vx.shape[0], vx.shape[1]);
                    let gv = -g.data[0].to_f64() / n as f64;
                    let mut dx = Buf::zeros(vx.shape.clone());
                    for (i, &y) in labels.iter().enumerate() {
                        dx.data[i * c + y] = T::from_f64(gv);
                    }
                    out.push((x, dx));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Buf<T>>], id: NodeId, delta: Buf<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            debug_assert_eq!(existing.shape, delta.shape, "gradient shape drift");
            for (dst, src) in existing.data.iter_mut().zip(delta.data) {
                *dst += src;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Static geometry of one convolution application.
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
}

/// Unfold one sample `[cin,h,w]` into `[cin*kh*kw, hout*wout]` patch columns.
fn im2col<T: Scalar>(x: &[T], geo: &ConvGeometry, cols: &mut [T]) {
    let l = geo.hout * geo.wout;
    for c in 0..geo.cin {
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let krow = (c * geo.kh + ki) * geo.kw + kj;
                let dst = &mut cols[krow * l..(krow + 1) * l];
                for oy in 0..geo.hout {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    let drow = &mut dst[oy * geo.wout..(oy + 1) * geo.wout];
                    if iy < 0 || iy >= geo.h as isize {
                        drow.fill(T::ZERO);
                        continue;
                    }
                    let src_row = &x[(c * geo.h + iy as usize) * geo.w..(c * geo.h + iy as usize + 1) * geo.w];
                    for ox in 0..geo.wout {
                        let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                        drow[ox] = if ix < 0 || ix >= geo.w as isize {
                            T::ZERO
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold patch-column gradients back onto the image, accumulating overlaps.
fn col2im_add<T: Scalar>(cols: &[T], geo: &ConvGeometry, x: &mut [T]) {
    let l = geo.hout * geo.wout;
    for c in 0..geo.cin {
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let krow = (c * geo.kh + ki) * geo.kw + kj;
                let src = &cols[krow * l..(krow + 1) * l];
                for oy in 0..geo.hout {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    for ox in 0..geo.wout {
                        let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                        if ix < 0 || ix >= geo.w as isize {
                            continue;
                        }
                        x[(c * geo.h + iy as usize) * geo.w + ix as usize] +=
                            src[oy * geo.wout + ox];
                    }
                }
            }
        }
    }
}

/// Build a graph over one parameter block, run backward, and fold gradients
/// into the block's gradient slots. Returns the loss value.
pub fn forward_backward<T: Scalar>(
    block: &mut ParamBlock,
    build: impl FnOnce(&mut Graph<T>, &ParamBlock) -> NodeId,
) -> Result<f64> {
    let mut g: Graph<T> = Graph::new();
    let loss = build(&mut g, block);
    let value = g.backward(loss)?;
    g.accumulate_grads(block);
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_with(name: &str, t: Tensor) -> ParamBlock {
        let mut b = ParamBlock::new();
        b.insert(name, t);
        b
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut block = block_with("p", Tensor::new([3], vec![1.0, -2.0, 0.5]));
        let loss = forward_backward::<f32>(&mut block, |g, b| {
            let p = g.param(b, "p");
            g.sum_all(p)
        })
        .unwrap();
        assert_eq!(loss, -0.5);
        assert_eq!(block.grad("p").data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_sum_square_gradient_equals_param() {
        let vals = vec![1.0, -2.0, 0.5, 3.0];
        let mut block = block_with("p", Tensor::new([4], vals.clone()));
        forward_backward::<f32>(&mut block, |g, b| {
            let p = g.param(b, "p");
            let sq = g.mul(p, p);
            let s = g.sum_all(sq);
            g.scale(s, 0.5)
        })
        .unwrap();
        assert_eq!(block.grad("p").data(), &vals[..]);
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let mut block = ParamBlock::new();
        block.insert("used", Tensor::new([2], vec![1.0, 2.0]));
        block.insert("unused", Tensor::new([2], vec![3.0, 4.0]));
        forward_backward::<f32>(&mut block, |g, b| {
            let p = g.param(b, "used");
            g.sum_all(p)
        })
        .unwrap();
        assert_eq!(block.grad("unused").data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_forward_is_reported_with_op_name() {
        let mut block = block_with("p", Tensor::new([1], vec![100.0]));
        let err = forward_backward::<f32>(&mut block, |g, b| {
            let p = g.param(b, "p");
            let sq = g.mul(p, p); // 1e4
            let sq2 = g.mul(sq, sq); // 1e8
            let sq3 = g.mul(sq2, sq2); // 1e16
            let sq4 = g.mul(sq3, sq3); // 1e32
            let e = g.exp(sq4); // overflows to +inf
            g.sum_all(e)
        })
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("exp"), "{msg}");
    }

    #[test]
    fn matmul_gradients_match_hand_computation() {
        // loss = sum(A @ B) with A=[1,2;3,4], B=[5,6;7,8]
        // dA = ones @ B^T = [[11,15],[11,15]], dB = A^T @ ones = [[4,4],[6,6]]
        let mut block = ParamBlock::new();
        block.insert("a", Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        block.insert("b", Tensor::new([2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        forward_backward::<f32>(&mut block, |g, bl| {
            let a = g.param(bl, "a");
            let b = g.param(bl, "b");
            let c = g.matmul(a, b);
            g.sum_all(c)
        })
        .unwrap();
        assert_eq!(block.grad("a").data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(block.grad("b").data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn repeated_param_registration_shares_a_node() {
        let mut block = block_with("p", Tensor::new([2], vec![1.0, 2.0]));
        // loss = sum(p) + sum(p) => grad = 2
        forward_backward::<f32>(&mut block, |g, b| {
            let p1 = g.param(b, "p");
            let p2 = g.param(b, "p");
            assert_eq!(p1, p2);
            let s1 = g.sum_all(p1);
            let s2 = g.sum_all(p2);
            g.add(s1, s2)
        })
        .unwrap();
        assert_eq!(block.grad("p").data(), &[2.0, 2.0]);
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.input(&Tensor::new([1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()));
        // 3x3 kernel with center 1: identity under pad=1
        let mut kdata = vec![0.0; 9];
        kdata[4] = 1.0;
        let w = g.input(&Tensor::new([1, 1, 3, 3], kdata));
        let y = g.conv2d(x, w, 1, 1);
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv2d_stride_two_shape() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.input(&Tensor::zeros([2, 3, 8, 8]));
        let w = g.input(&Tensor::zeros([5, 3, 3, 3]));
        let y = g.conv2d(x, w, 2, 1);
        assert_eq!(g.shape(y), &[2, 5, 4, 4]);
    }

    #[test]
    fn log_softmax_rows_are_normalized() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.input(&Tensor::new([2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let y = g.log_softmax_rows(x);
        let v = g.value(y);
        for row in v.data().chunks(3) {
            let total: f64 = row.iter().map(|&l| (l as f64).exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_then_pool_round_trips_constant() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.input(&Tensor::full([1, 2, 2, 2], 3.0));
        let up = g.upsample_nearest_2x(x);
        assert_eq!(g.shape(up), &[1, 2, 4, 4]);
        let pooled = g.global_avg_pool(up);
        assert_eq!(g.value(pooled).data(), &[3.0, 3.0]);
    }

    #[test]
    fn embedding_gathers_rows() {
        let mut g: Graph<f32> = Graph::new();
        let t = g.input(&Tensor::new([3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]));
        let e = g.embedding(t, &[2, 0, 2]);
        assert_eq!(g.value(e).data(), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
    }

    #[test]
    fn group_norm_normalizes_groups() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.input(&Tensor::new([1, 2, 1, 2], vec![1.0, 3.0, -5.0, 5.0]));
        let gamma = g.input(&Tensor::full([2], 1.0));
        let beta = g.input(&Tensor::zeros([2]));
        let y = g.group_norm(x, gamma, beta, 2);
        let v = g.value(y);
        // each group of two normalizes to +-1 (up to eps)
        assert!((v.data()[0] + 1.0).abs() < 1e-2);
        assert!((v.data()[1] - 1.0).abs() < 1e-2);
    }
}
