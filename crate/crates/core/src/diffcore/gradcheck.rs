//! Central finite differences, used as an independent oracle for tape
//! gradients.

use alloc::vec::Vec;

use crate::math;

/// `∂f/∂x_i ≈ (f(x + εe_i) − f(x − εe_i)) / 2ε` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest per-coordinate relative error, with an absolute floor `atol`
/// for coordinates whose gradient is near zero:
/// `|a − b| / max(|a|, |b|, atol)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], atol: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| math::abs(a - b) / math::abs(a).max(math::abs(b)).max(atol))
        .fold(0.0, f64::max)
}
