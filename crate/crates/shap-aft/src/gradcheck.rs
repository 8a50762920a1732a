//! Central finite-difference gradient checking.
//!
//! The checker only ever calls a forward function, so it is independent of
//! the reverse-mode pass it validates. Tests perturb one coordinate at a
//! time with step 1e-5 and compare at relative tolerance 1e-4 (64-bit).

/// Central difference gradient of a scalar function at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut pt = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = pt[i];
        pt[i] = orig + h;
        let fp = f(&pt);
        pt[i] = orig - h;
        let fm = f(&pt);
        pt[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error between an analytic and a numeric value, with a small
/// floor so near-zero pairs compare as equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-8)
}

/// Largest elementwise relative error between two gradients.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Standard step size for the 64-bit central-difference checks.
pub const FD_STEP: f64 = 1e-5;

/// Standard relative tolerance for gradient agreement.
pub const FD_TOL: f64 = 1e-4;
