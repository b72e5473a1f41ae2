//! Small dense linear-algebra kernels.
//!
//! Matrices are row-major `&[f64]` slices. The dimensions involved are tiny
//! (network widths around 100, state dimensions below 10) so there is no
//! blocking or threading here — just layouts and loop shapes the compiler
//! vectorizes well. `dot` uses a fixed 8-lane accumulator split, which also
//! pins the summation order so results are bit-reproducible run to run.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

const LANES: usize = 8;

/// Dot product with a fixed lane-split reduction order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0;
    for (xa, xb) in ca.remainder().iter().zip(cb.remainder()) {
        tail += xa * xb;
    }
    let s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (s01 + s23) + tail
}

/// y += c * x
#[inline]
pub fn axpy(y: &mut [f64], c: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += c * xi;
    }
}

/// y = W x for row-major W of shape (rows, cols).
#[inline]
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(y.len(), rows);
    for (yi, row) in y.iter_mut().zip(w.chunks_exact(cols)) {
        *yi = dot(row, x);
    }
}

/// y = Wᵀ x for row-major W of shape (rows, cols); x has length `rows`.
///
/// Runs over rows with an axpy so the inner loop has no reduction.
#[inline]
pub fn mat_t_vec(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    debug_assert_eq!(y.len(), cols);
    y.fill(0.0);
    for (xi, row) in x.iter().zip(w.chunks_exact(cols)) {
        axpy(y, *xi, row);
    }
}

/// out += a bᵀ, row-major out of shape (a.len(), b.len()).
#[inline]
pub fn outer_acc(out: &mut [f64], a: &[f64], b: &[f64]) {
    debug_assert_eq!(out.len(), a.len() * b.len());
    for (ai, row) in a.iter().zip(out.chunks_exact_mut(b.len())) {
        axpy(row, *ai, b);
    }
}

/// Solve A x = b in place by LU with partial pivoting; `a` is row-major
/// (n, n) and is destroyed, `b` becomes the solution.
pub fn solve_dense(a: &mut [f64], n: usize, b: &mut [f64]) -> Result<()> {
    if a.len() != n * n || b.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n * n,
            actual: a.len(),
        });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        // Pivot on the largest magnitude in column k.
        let mut p = k;
        let mut best = libm::fabs(a[perm[k] * n + k]);
        for r in (k + 1)..n {
            let v = libm::fabs(a[perm[r] * n + k]);
            if v > best {
                best = v;
                p = r;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return Err(Error::SingularMatrix { pivot: best });
        }
        perm.swap(k, p);
        let pk = perm[k];
        let akk = a[pk * n + k];
        for r in (k + 1)..n {
            let pr = perm[r];
            let f = a[pr * n + k] / akk;
            a[pr * n + k] = f;
            for c in (k + 1)..n {
                a[pr * n + c] -= f * a[pk * n + c];
            }
            b[pr] -= f * b[pk];
        }
    }
    // Back substitution into a scratch, then unpermute.
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let pk = perm[k];
        let mut s = b[pk];
        for c in (k + 1)..n {
            s -= a[pk * n + c] * x[c];
        }
        x[k] = s / a[pk * n + k];
    }
    b.copy_from_slice(&x);
    Ok(())
}
