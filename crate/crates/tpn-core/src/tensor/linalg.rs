//! Plain dense linear algebra on row-major `f64` slices.
//!
//! These routines back the differentiable `linsolve` tape op and the
//! spectral diagnostics. The LU factorization is kept as a value so the
//! backward pass can reuse it for the transposed solve instead of
//! refactoring.

use crate::error::{Error, Result};

/// Pivot magnitudes below this are treated as singular.
pub const PIVOT_THRESHOLD: f64 = 1e-12;

/// Row-major matrix product: `a` is `m x k`, `b` is `k x n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

/// LU factorization with partial pivoting, stored packed: strictly lower
/// triangle holds L (unit diagonal implied), upper triangle holds U.
/// `swaps[k]` records the row exchanged with row `k` at step `k`.
#[derive(Debug, Clone)]
pub struct LuFactors {
    n: usize,
    lu: Vec<f64>,
    swaps: Vec<usize>,
}

impl LuFactors {
    /// Factors the `n x n` matrix `a`. Fails with the offending column when
    /// the best available pivot falls below [`PIVOT_THRESHOLD`].
    pub fn factor(a: &[f64], n: usize) -> Result<Self> {
        debug_assert_eq!(a.len(), n * n);
        let mut lu = a.to_vec();
        let mut swaps = vec![0usize; n];
        for k in 0..n {
            let mut pivot_row = k;
            let mut pivot_mag = lu[k * n + k].abs();
            for i in k + 1..n {
                let mag = lu[i * n + k].abs();
                if mag > pivot_mag {
                    pivot_mag = mag;
                    pivot_row = i;
                }
            }
            if pivot_mag < PIVOT_THRESHOLD {
                return Err(Error::Singular { pivot_index: k, threshold: PIVOT_THRESHOLD });
            }
            swaps[k] = pivot_row;
            if pivot_row != k {
                for j in 0..n {
                    lu.swap(k * n + j, pivot_row * n + j);
                }
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let factor = lu[i * n + k] / pivot;
                lu[i * n + k] = factor;
                for j in k + 1..n {
                    lu[i * n + j] -= factor * lu[k * n + j];
                }
            }
        }
        Ok(LuFactors { n, lu, swaps })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Solves `A X = B` for `B` with `cols` right-hand sides (row-major
    /// `n x cols`).
    pub fn solve(&self, b: &[f64], cols: usize) -> Vec<f64> {
        let n = self.n;
        debug_assert_eq!(b.len(), n * cols);
        let mut x = b.to_vec();
        // Apply the recorded row exchanges, then forward- and back-substitute.
        for k in 0..n {
            let s = self.swaps[k];
            if s != k {
                for j in 0..cols {
                    x.swap(k * cols + j, s * cols + j);
                }
            }
        }
        for i in 1..n {
            for p in 0..i {
                let l = self.lu[i * n + p];
                if l == 0.0 {
                    continue;
                }
                for j in 0..cols {
                    x[i * cols + j] -= l * x[p * cols + j];
                }
            }
        }
        for i in (0..n).rev() {
            for p in i + 1..n {
                let u = self.lu[i * n + p];
                if u == 0.0 {
                    continue;
                }
                for j in 0..cols {
                    x[i * cols + j] -= u * x[p * cols + j];
                }
            }
            let d = self.lu[i * n + i];
            for j in 0..cols {
                x[i * cols + j] /= d;
            }
        }
        x
    }

    /// Solves `A^T Z = G` reusing the factorization of `A`.
    ///
    /// From `P A = L U` we get `A^T = U^T L^T P`, so the solve runs
    /// `U^T w = g` (forward), `L^T y = w` (backward), then undoes the row
    /// exchanges in reverse order.
    pub fn solve_transposed(&self, g: &[f64], cols: usize) -> Vec<f64> {
        let n = self.n;
        debug_assert_eq!(g.len(), n * cols);
        let mut z = g.to_vec();
        for i in 0..n {
            let d = self.lu[i * n + i];
            for j in 0..cols {
                z[i * cols + j] /= d;
            }
            for p in i + 1..n {
                let u = self.lu[i * n + p];
                if u == 0.0 {
                    continue;
                }
                for j in 0..cols {
                    z[p * cols + j] -= u * z[i * cols + j];
                }
            }
        }
        for i in (0..n).rev() {
            for p in i + 1..n {
                let l = self.lu[p * n + i];
                if l == 0.0 {
                    continue;
                }
                for j in 0..cols {
                    z[i * cols + j] -= l * z[p * cols + j];
                }
            }
        }
        for k in (0..n).rev() {
            let s = self.swaps[k];
            if s != k {
                for j in 0..cols {
                    z.swap(k * cols + j, s * cols + j);
                }
            }
        }
        z
    }
}

/// Estimates the spectral radius of a symmetric `n x n` matrix by power
/// iteration from a fixed deterministic start vector.
pub fn spectral_radius_sym(s: &[f64], n: usize, iters: usize) -> f64 {
    debug_assert_eq!(s.len(), n * n);
    if n == 0 {
        return 0.0;
    }
    // Slightly uneven start so the iterate is not orthogonal to the
    // dominant eigenvector by accident.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 + 1.0) * 1e-3).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = matmul(s, &v, n, n, 1);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w;
        for x in &mut v {
            *x /= norm;
        }
    }
    lambda
}
