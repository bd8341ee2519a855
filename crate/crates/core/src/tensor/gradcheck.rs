//! Finite-difference gradient oracles.
//!
//! Verification support: evaluates a scalar function by re-running its
//! forward pass under central perturbations, entirely independent of the
//! tape's backward rules it is used to check.

/// Central finite differences: df/dx_i ~ (f(x+h*e_i) - f(x-h*e_i)) / 2h.
pub fn central_diff<F>(mut f: F, x0: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst-case relative error between two gradients, normalized by the
/// gradient magnitude scale (with a small floor so near-zero gradients
/// compare absolutely).
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-2);
    analytic
        .iter()
        .zip(numeric.iter())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

pub const GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
