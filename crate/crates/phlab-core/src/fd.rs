//! Finite-difference helpers.
//!
//! Central differences are the reference oracle the autodiff tests are
//! checked against; the forward Jacobian feeds the Newton solver for
//! implicit integration steps.

use alloc::vec;
use alloc::vec::Vec;

/// Central-difference gradient of a scalar function.
pub fn central_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let xi = x[i];
        xp[i] = xi + h;
        let fp = f(&xp);
        xp[i] = xi - h;
        let fm = f(&xp);
        xp[i] = xi;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Forward-difference Jacobian, row-major (m outputs, n inputs).
pub fn forward_jacobian<F: FnMut(&[f64]) -> Vec<f64>>(
    mut f: F,
    x: &[f64],
    h: f64,
) -> Vec<f64> {
    let f0 = f(x);
    let (m, n) = (f0.len(), x.len());
    let mut jac = vec![0.0; m * n];
    let mut xp = x.to_vec();
    for j in 0..n {
        let xj = x[j];
        xp[j] = xj + h;
        let fj = f(&xp);
        xp[j] = xj;
        for i in 0..m {
            jac[i * n + j] = (fj[i] - f0[i]) / h;
        }
    }
    jac
}
