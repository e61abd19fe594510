//! Central-difference gradient checking.

use alloc::vec::Vec;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar function.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Max over coordinates of `|analytic − numeric| / max(1e-8, |numeric|)`.
///
/// Panics if `analytic` and `x` differ in length.
pub fn grad_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    assert_eq!(x.len(), analytic.len(), "analytic gradient length");
    let numeric = numeric_gradient(f, x, h);
    max_rel_err(analytic, &numeric)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| libm::fabs(a - n) / libm::fabs(*n).max(1e-8))
        .fold(0.0, f64::max)
}
