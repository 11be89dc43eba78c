//! Dense row-major `f32` tensors.
//!
//! This is deliberately minimal: a shape plus a flat buffer. All numeric
//! heavy lifting lives in [`crate::nn`] (differentiable graph ops) and the
//! sampling code; `Tensor` itself only provides construction, indexing
//! helpers and a handful of elementwise conveniences used outside the
//! training graph.
//!
//! Reductions accumulate in `f64` so that test oracles can pin values
//! tightly; buffers themselves stay `f32`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor from a shape and matching flat buffer.
    ///
    /// Panics if the element count does not match the shape product; that is
    /// a programmer error, not a runtime condition.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Tensor {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor shape {:?} implies {} elements, got {}",
            shape,
            n,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Tensor {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Tensor {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::new([1], vec![value])
    }

    pub fn from_slice(shape: impl Into<Vec<usize>>, data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Tensor {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "reshape {:?} -> {:?}", self.shape, shape);
        self.shape = shape;
        self
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Error unless every element is finite; `op` names the producing
    /// operation for the error message.
    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::numeric(
                op,
                format!("non-finite value {} at flat index {}", self.data[i], i),
            )),
        }
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        assert_eq!(
            self.shape, other.shape,
            "elementwise op on mismatched shapes {:?} vs {:?}",
            self.shape, other.shape
        );
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.sum() / self.data.len() as f64
    }

    /// Population variance, accumulated in `f64`.
    pub fn variance(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let m = self.mean();
        self.data
            .iter()
            .map(|&v| {
                let d = v as f64 - m;
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    /// Mean squared difference between two same-shape tensors (`f64` accum).
    pub fn mse(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "mse on mismatched shapes");
        if self.data.is_empty() {
            return 0.0;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }
}

/// Stack same-shape tensors along a new leading axis.
pub fn stack(items: &[&Tensor]) -> Tensor {
    assert!(!items.is_empty(), "stack of zero tensors");
    let shape = items[0].shape().to_vec();
    for t in items {
        assert_eq!(t.shape(), &shape[..], "stack on mismatched shapes");
    }
    let mut out_shape = Vec::with_capacity(shape.len() + 1);
    out_shape.push(items.len());
    out_shape.extend_from_slice(&shape);
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for t in items {
        data.extend_from_slice(t.data());
    }
    Tensor::new(out_shape, data)
}

/// Slice element `i` off the leading axis of a stacked tensor.
pub fn unstack_one(t: &Tensor, i: usize) -> Tensor {
    assert!(t.ndim() >= 1, "unstack of a scalar");
    let n = t.shape()[0];
    assert!(i < n, "unstack index {} out of {}", i, n);
    let inner: usize = t.shape()[1..].iter().product();
    let data = t.data()[i * inner..(i + 1) * inner].to_vec();
    Tensor::new(t.shape()[1..].to_vec(), data)
}
