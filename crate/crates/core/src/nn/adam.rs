//! Adam optimizer with bias correction.

use super::params::ParamBlock;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    steps: u64,
    /// First/second moment estimates, aligned with the bound block's entries.
    moments: Option<AdamState>,
}

struct AdamState {
    block_id: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Standard coefficients: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(lr: f32) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            moments: None,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// One update from the gradients currently accumulated in `block`.
    ///
    /// The optimizer binds to the first block it sees; applying it to a
    /// different block, or to a block whose parameter shapes have drifted
    /// from the stored moments, is a configuration error.
    pub fn step(&mut self, block: &mut ParamBlock) -> Result<()> {
        let state = match &mut self.moments {
            None => {
                let m = (0..block.len())
                    .map(|i| Tensor::zeros(block.value_at(i).shape().to_vec()))
                    .collect::<Vec<_>>();
                let v = m.clone();
                self.moments = Some(AdamState {
                    block_id: block.id(),
                    m,
                    v,
                });
                self.moments.as_mut().unwrap()
            }
            Some(s) => s,
        };
        if state.block_id != block.id() {
            return Err(Error::config(format!(
                "optimizer is bound to parameter block {} but was applied to block {}",
                state.block_id,
                block.id()
            )));
        }
        if state.m.len() != block.len() {
            return Err(Error::config(format!(
                "optimizer state covers {} parameters but block has {}",
                state.m.len(),
                block.len()
            )));
        }
        for i in 0..block.len() {
            if state.m[i].shape() != block.value_at(i).shape() {
                return Err(Error::config(format!(
                    "optimizer state shape {:?} does not match parameter `{}` shape {:?}",
                    state.m[i].shape(),
                    block.name_at(i),
                    block.value_at(i).shape()
                )));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - (self.beta1 as f64).powi(t);
        let c2 = 1.0 - (self.beta2 as f64).powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for i in 0..block.len() {
            let grad = block.grad_at(i).clone();
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            let p = block.value_at_mut(i).data_mut();
            for j in 0..p.len() {
                let g = grad.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mhat = m[j] as f64 / c1;
                let vhat = v[j] as f64 / c2;
                p[j] -= (self.lr as f64 * mhat / (vhat.sqrt() + self.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param_block(value: f32) -> ParamBlock {
        let mut b = ParamBlock::new();
        b.insert("p", Tensor::scalar(value));
        b
    }

    fn set_grad(block: &mut ParamBlock, g: f32) {
        block.zero_grads();
        block.accumulate_grad_at(0, &Tensor::scalar(g));
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut block = one_param_block(1.25);
        let mut opt = Adam::new(1e-3);
        block.zero_grads();
        opt.step(&mut block).unwrap();
        assert_eq!(block.value("p").data()[0], 1.25);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // With bias correction, a unit gradient moves the parameter by ~lr
        // on step one: mhat = 1, vhat = 1 => delta = lr / (1 + eps).
        let mut block = one_param_block(0.0);
        let mut opt = Adam::new(1e-3);
        set_grad(&mut block, 1.0);
        opt.step(&mut block).unwrap();
        let delta = -block.value("p").data()[0];
        assert!((delta - 1e-3).abs() < 1e-8, "delta {delta}");
    }

    #[test]
    fn constant_gradient_converges_to_signed_lr_step() {
        // Long-run limit under a constant gradient g: mhat -> g, vhat -> g^2,
        // so each update approaches -lr * sign(g).
        let mut block = one_param_block(0.0);
        let mut opt = Adam::new(1e-2);
        let g = -0.37;
        let mut prev = 0.0f32;
        let mut last_delta = 0.0f32;
        for _ in 0..500 {
            set_grad(&mut block, g);
            opt.step(&mut block).unwrap();
            let cur = block.value("p").data()[0];
            last_delta = cur - prev;
            prev = cur;
        }
        // gradient negative => parameter climbs by ~lr per step
        assert!((last_delta - 1e-2).abs() < 1e-4, "last step {last_delta}");
    }

    #[test]
    fn applying_to_a_different_block_is_a_config_error() {
        let mut a = one_param_block(0.0);
        let mut b = one_param_block(0.0);
        let mut opt = Adam::new(1e-3);
        a.zero_grads();
        opt.step(&mut a).unwrap();
        let err = opt.step(&mut b).unwrap_err();
        assert!(err.to_string().contains("configuration"), "{err}");
    }
}
