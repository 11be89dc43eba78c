//! Central finite-difference verification of analytic gradients.
//!
//! The check re-evaluates the caller's loss graph at `p ± h` per sampled
//! coordinate and compares `(L(p+h) - L(p-h)) / (2h)` against the gradient
//! from the reverse-mode sweep. Evaluation runs at `f64` precision
//! the graph is precision-generic — so the difference quotient is limited by
//! truncation error, not rounding noise, and a 1e-3 relative tolerance at
//! step 1e-4 is meaningful.
//!
//! Parameters are stored as `f32`; the perturbed values are rounded into the
//! parameter store and the difference quotient uses the *actually applied*
//! step (`f64` difference of the two rounded values), which keeps the
//! quotient exact with respect to what the graph saw.

use super::graph::{forward_backward, Graph, NodeId};
use super::params::ParamBlock;
use crate::error::Result;
use crate::rng::SeededRng;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.rel_error <= self.tolerance)
    }

    /// Entry with the largest relative error, for failure messages.
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Relative error with an absolute regime near zero: two gradients both
/// smaller than 1e-6 in magnitude compare by absolute difference, everything
/// else by `|a-n| / max(|a|,|n|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-6 {
        diff
    } else {
        diff / scale
    }
}

/// Verify the analytic gradients of `build`'s loss against central finite
/// differences.
///
/// * `step` — finite-difference half-step `h`.
/// * `tolerance` — per-coordinate relative error bound for `passed()`.
/// * `max_checks_per_param` — coordinates sampled per parameter tensor
///   (all of them when the tensor is at most that large).
///
/// The builder must be deterministic: it is re-run twice per checked
/// coordinate and once for the analytic sweep, and any internal randomness
/// would corrupt the difference quotient.
pub fn gradient_check(
    block: &mut ParamBlock,
    step: f64,
    tolerance: f64,
    max_checks_per_param: usize,
    rng: &mut SeededRng,
    build: impl Fn(&mut Graph<f64>, &ParamBlock) -> NodeId,
) -> Result<GradCheckReport> {
    assert!(step > 0.0, "finite-difference step must be positive");
    assert!(max_checks_per_param > 0, "must check at least one coordinate");
    block.zero_grads();
    forward_backward::<f64>(block, &build)?;
    let analytic: Vec<Vec<f32>> = (0..block.len())
        .map(|i| block.grad_at(i).data().to_vec())
        .collect();

    let eval = |block: &ParamBlock| -> Result<f64> {
        let mut g: Graph<f64> = Graph::new();
        let loss = build(&mut g, block);
        g.eval_checked(loss)
    };

    let mut entries = Vec::new();
    for i in 0..block.len() {
        let len = block.value_at(i).len();
        let indices: Vec<usize> = if len <= max_checks_per_param {
            (0..len).collect()
        } else {
            let mut picked = rng.sample_indices(len, max_checks_per_param);
            picked.sort_unstable();
            picked
        };
        for j in indices {
            let original = block.value_at(i).data()[j];
            let plus = ((original as f64) + step) as f32;
            let minus = ((original as f64) - step) as f32;

            block.value_at_mut(i).data_mut()[j] = plus;
            let loss_plus = eval(block)?;
            block.value_at_mut(i).data_mut()[j] = minus;
            let loss_minus = eval(block)?;
            block.value_at_mut(i).data_mut()[j] = original;

            let applied = plus as f64 - minus as f64;
            let numeric = (loss_plus - loss_minus) / applied;
            let a = analytic[i][j] as f64;
            entries.push(GradCheckEntry {
                param: block.name_at(i).to_string(),
                flat_index: j,
                analytic: a,
                numeric,
                rel_error: rel_error(a, numeric),
            });
        }
    }
    Ok(GradCheckReport { entries, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Linear;

    /// Three dense layers with tanh nonlinearities and a quadratic loss.
    fn perceptron_block(rng: &mut SeededRng) -> (ParamBlock, [Linear; 3]) {
        let mut block = ParamBlock::new();
        let l1 = Linear::init(&mut block, "l1", 4, 8, rng);
        let l2 = Linear::init(&mut block, "l2", 8, 8, rng);
        let l3 = Linear::init(&mut block, "l3", 8, 2, rng);
        (block, [l1, l2, l3])
    }

    #[test]
    fn perceptron_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(17);
        let (mut block, layers) = perceptron_block(&mut rng);
        let x = rng.normal_tensor([5, 4]);
        let mut check_rng = SeededRng::new(5);
        let report = gradient_check(
            &mut block,
            1e-4,
            1e-3,
            6,
            &mut check_rng,
            move |g, b| {
                let mut h = g.input(&x);
                for (i, l) in layers.iter().enumerate() {
                    h = l.forward(g, b, h);
                    if i + 1 < layers.len() {
                        h = g.tanh(h);
                    }
                }
                let sq = g.mul(h, h);
                let s = g.sum_all(sq);
                g.scale(s, 0.5)
            },
        )
        .unwrap();
        assert!(
            report.passed(),
            "worst entry: {:?}",
            report.worst()
        );
    }

    #[test]
    fn parameter_unused_by_loss_passes_with_zero_gradient() {
        let mut rng = SeededRng::new(3);
        let mut block = ParamBlock::new();
        block.insert("used", rng.normal_tensor([4]));
        block.insert("ignored", rng.normal_tensor([4]));
        let mut check_rng = SeededRng::new(0);
        let report = gradient_check(&mut block, 1e-4, 1e-3, 8, &mut check_rng, |g, b| {
            let p = g.param(b, "used");
            let sq = g.mul(p, p);
            g.sum_all(sq)
        })
        .unwrap();
        assert!(report.passed());
        for e in report.entries.iter().filter(|e| e.param == "ignored") {
            assert_eq!(e.analytic, 0.0);
            assert!(e.numeric.abs() < 1e-9);
        }
    }

    #[test]
    fn corrupted_gradient_fails_the_check() {
        let mut rng = SeededRng::new(3);
        let mut block = ParamBlock::new();
        block.insert("p", rng.normal_tensor([6]));
        let mut check_rng = SeededRng::new(0);
        let report = gradient_check(&mut block, 1e-4, 1e-3, 6, &mut check_rng, |g, b| {
            let p = g.param(b, "p");
            let sq = g.mul(p, p);
            g.sum_all(sq)
        })
        .unwrap();
        assert!(report.passed());
        // Doubling the analytic gradient must push entries past tolerance.
        let corrupted_max = report
            .entries
            .iter()
            .map(|e| rel_error(2.0 * e.analytic, e.numeric))
            .fold(0.0, f64::max);
        assert!(
            corrupted_max > report.tolerance,
            "corrupted max {corrupted_max}"
        );
    }
}
