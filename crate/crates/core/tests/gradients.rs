//! Finite-difference verification of every differentiable block, from
//! single ops to the denoiser/detector/variational-head composites.

use sona_core::diagnostics::gradient_suite;

#[test]
fn every_block_passes_finite_difference_checks() {
    let entries = gradient_suite().expect("suite construction");
    assert!(entries.len() >= 25, "suite lost coverage: {}", entries.len());
    let mut failures = Vec::new();
    for e in &entries {
        if !e.report.passed() {
            let worst = e.report.worst().unwrap();
            failures.push(format!(
                "{}: {}[{}] analytic {} vs numeric {} (rel {:.3e})",
                e.name, worst.param, worst.flat_index, worst.analytic, worst.numeric,
                worst.rel_error
            ));
        }
    }
    assert!(failures.is_empty(), "gradient failures:\n{}", failures.join("\n"));
}
