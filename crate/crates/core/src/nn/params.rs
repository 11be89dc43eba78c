//! Named, ordered parameter storage.
//!
//! A [`ParamBlock`] owns every trainable tensor of one model component along
//! with a same-shaped gradient slot per parameter. Iteration order is
//! insertion order, which makes optimizer updates and checkpoint layout
//! deterministic. Each block carries a process-unique id so a computation
//! graph can route gradients back to the block that owns a given parameter.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_BLOCK_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
pub struct ParamBlock {
    id: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamBlock {
    pub fn new() -> ParamBlock {
        ParamBlock {
            id: NEXT_BLOCK_ID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Register a parameter. Names must be unique within the block.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let grad = Tensor::zeros(value.shape().to_vec());
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        self.grads.push(grad);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name_at(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn value(&self, name: &str) -> &Tensor {
        let idx = self.expect(name);
        &self.values[idx]
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor {
        let idx = self.expect(name);
        &mut self.values[idx]
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        let idx = self.expect(name);
        &self.grads[idx]
    }

    pub fn value_at(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn value_at_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.values[idx]
    }

    pub fn grad_at(&self, idx: usize) -> &Tensor {
        &self.grads[idx]
    }

    /// Add `delta` into the gradient slot at `idx`.
    pub fn accumulate_grad_at(&mut self, idx: usize, delta: &Tensor) {
        let g = &mut self.grads[idx];
        assert_eq!(g.shape(), delta.shape(), "gradient shape mismatch");
        for (dst, src) in g.data_mut().iter_mut().zip(delta.data()) {
            *dst += src;
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// `(name, value)` pairs in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// Overwrite a parameter value in place; shapes must match.
    pub fn load_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let idx = self.position(name).ok_or_else(|| {
            Error::config(format!("checkpoint is missing parameter `{name}`"))
        })?;
        if self.values[idx].shape() != value.shape() {
            return Err(Error::config(format!(
                "parameter `{name}` has shape {:?} but checkpoint provides {:?}",
                self.values[idx].shape(),
                value.shape()
            )));
        }
        self.values[idx] = value;
        Ok(())
    }

    fn expect(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }
}

impl Default for ParamBlock {
    fn default() -> Self {
        Self::new()
    }
}
