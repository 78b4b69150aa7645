//! Central finite-difference gradient checking.

use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Pass threshold for the worst elementwise relative error.
pub const MAX_REL_ERROR: f64 = 1e-4;

/// Denominator floor: gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Worst elementwise relative error between two equally long gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at every element of `x`.
pub fn numeric_gradient(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros_like(x);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Central differences of `sum_k f(x)[k]`, formed term by term so that terms
/// a coordinate does not touch cancel exactly instead of adding rounding
/// noise to the total.
pub fn numeric_gradient_terms(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> Vec<f64>) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros_like(x);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let diff: f64 = up.iter().zip(&down).map(|(u, d)| u - d).sum();
        grad.data_mut()[i] = diff / (2.0 * step);
    }
    grad
}

/// [`check`] for a function given as a sum of terms.
pub fn check_terms(x: &Tensor, analytic: &Tensor, f: impl FnMut(&Tensor) -> Vec<f64>) -> f64 {
    let numeric = numeric_gradient_terms(x, FD_STEP, f);
    max_relative_error(analytic.data(), numeric.data())
}

/// Compares an analytic gradient of `f` at `x` against central differences.
pub fn check(x: &Tensor, analytic: &Tensor, f: impl FnMut(&Tensor) -> f64) -> f64 {
    let numeric = numeric_gradient(x, FD_STEP, f);
    max_relative_error(analytic.data(), numeric.data())
}
