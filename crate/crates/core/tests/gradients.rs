use adverseg_core::diagnostics::{check_case, gradient_suite, tolerance, GradCase};
use adverseg_core::Scalar;

fn run<T: Scalar>() {
    let results = gradient_suite::<T>(7).unwrap();
    assert_eq!(results.len(), GradCase::ALL.len());
    let mut failed = Vec::new();
    for r in &results {
        println!("{:<24} {:>4} {:.3e} skipped {}/{}", r.case.name(), T::NAME, r.error, r.skipped, r.elements);
        if !r.passes(tolerance::<T>()) {
            failed.push(r.case.name());
        }
    }
    assert!(failed.is_empty(), "above {:e}: {failed:?}", tolerance::<T>());
}

#[test]
fn every_case_passes_at_f64() {
    run::<f64>();
}

#[test]
fn every_case_passes_at_f32() {
    run::<f32>();
}

/// Across seeds some gradient entries land arbitrarily close to zero, where
/// the elementwise ratio measures evaluation noise rather than the kernels,
/// so the sweep bounds the error relative to the gradient's scale.
#[test]
fn other_seeds_agree_at_gradient_scale() {
    for seed in 1..=6 {
        for case in GradCase::ALL {
            let r = check_case::<f64>(case, seed).unwrap();
            assert!(r.scaled_error < 1e-8 && r.skipped * 20 <= r.elements, "seed {seed}: {r:?}");
        }
    }
}
