//! Pointwise activations with explicit derivatives.

/// Negative-side slope of every leaky rectifier in the crate.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Leaky rectifier. Returns the activations and the branch taken per element
/// (`true` = positive side).
///
/// With `frozen` the branch pattern is imposed instead of read from the
/// sign of the input. Finite-difference checks use this to evaluate the
/// locally linear piece around a point without tripping over the kink.
pub fn leaky(pre: &[f64], frozen: Option<&[bool]>) -> (Vec<f64>, Vec<bool>) {
    let pattern: Vec<bool> = match frozen {
        Some(p) => p.to_vec(),
        None => pre.iter().map(|&z| z > 0.0).collect(),
    };
    let out = pre
        .iter()
        .zip(&pattern)
        .map(|(&z, &pos)| if pos { z } else { LEAKY_SLOPE * z })
        .collect();
    (out, pattern)
}

/// Multiplies `grad` in place by the leaky derivative for `pattern`.
pub fn leaky_backward(grad: &mut [f64], pattern: &[bool]) {
    for (g, &pos) in grad.iter_mut().zip(pattern) {
        if !pos {
            *g *= LEAKY_SLOPE;
        }
    }
}

/// Logits are clamped to this magnitude before the logistic function so that
/// probabilities stay strictly inside (0, 1).
pub const LOGIT_CLAMP: f64 = 30.0;

pub fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    1.0 / (1.0 + (-z).exp())
}
