//! Central finite-difference gradient checker.

/// Largest relative disagreement between `analytic` and central differences
/// of `f` around `theta`:
/// `max_i |a_i - n_i| / (|a_i| + |n_i| + 1e-12)` with
/// `n_i = (f(theta + eps e_i) - f(theta - eps e_i)) / (2 eps)`.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    eps: f64,
) -> f64 {
    assert_eq!(theta.len(), analytic.len(), "gradient length mismatch");
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        probe[i] = theta[i] + eps;
        let up = f(&probe);
        probe[i] = theta[i] - eps;
        let down = f(&probe);
        probe[i] = theta[i];
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = crate::math::abs(a - numeric)
            / (crate::math::abs(a) + crate::math::abs(numeric) + 1e-12);
        worst = worst.max(rel);
    }
    worst
}

/// Numeric gradient by central differences, for tests that want the vector.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], eps: f64) -> alloc::vec::Vec<f64> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            probe[i] = theta[i] + eps;
            let up = f(&probe);
            probe[i] = theta[i] - eps;
            let down = f(&probe);
            probe[i] = theta[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}
