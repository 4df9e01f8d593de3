//! Preconditioned conjugate gradients for the 7-point pressure stencil.
//!
//! The matrix is symmetric positive definite (Stieltjes): positive diagonal
//! of accumulation plus face conductances, non-positive off-diagonals. It is
//! stored by axis: `off[axis][i]` couples cell `i` with `i + stride(axis)`
//! (zero where the neighbor would wrap). Iteration order is fixed, so solves
//! are deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    /// Diagonal scaling. Slower, but its action is cell-local, which keeps
    /// solutions symmetric under grid symmetries down to rounding noise.
    Jacobi,
    /// Zero-fill incomplete Cholesky. Default.
    Ic0,
}

pub struct StencilMatrix {
    pub n: usize,
    pub strides: [usize; 3],
    pub diag: Vec<f64>,
    /// off[a][i] is the (non-positive) coupling between i and i+strides[a].
    pub off: [Vec<f64>; 3],
}

impl StencilMatrix {
    pub fn zeros(n: usize, strides: [usize; 3]) -> Self {
        StencilMatrix {
            n,
            strides,
            diag: vec![0.0; n],
            off: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    fn mul(&self, x: &[f64], y: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            y[i] = self.diag[i] * x[i];
        }
        for a in 0..3 {
            let s = self.strides[a];
            if s >= n {
                continue;
            }
            let m = n - s;
            let off = &self.off[a][..m];
            // Split into two slice passes so the loops vectorize.
            {
                let y_lo = &mut y[..m];
                let x_hi = &x[s..];
                for i in 0..m {
                    y_lo[i] += off[i] * x_hi[i];
                }
            }
            {
                let y_hi = &mut y[s..];
                let x_lo = &x[..m];
                for i in 0..m {
                    y_hi[i] += off[i] * x_lo[i];
                }
            }
        }
    }
}

enum Precond {
    Jacobi {
        inv_diag: Vec<f64>,
    },
    Ic0 {
        l_diag: Vec<f64>,
        l_off: [Vec<f64>; 3],
        strides: [usize; 3],
        /// 1 / (1^T A 1); additive coarse correction along the constant
        /// vector, the slow mode of closed no-flow boxes.
        inv_coarse: f64,
    },
}

impl Precond {
    fn build(a: &StencilMatrix, kind: Preconditioner) -> Self {
        match kind {
            Preconditioner::Jacobi => Precond::Jacobi {
                inv_diag: a.diag.iter().map(|d| 1.0 / d.max(1e-300)).collect(),
            },
            Preconditioner::Ic0 => {
                // Relaxed modified IC(0): fill dropped while eliminating a
                // row is lumped onto the downstream diagonal, which handles
                // the near-singular constant mode of closed no-flow boxes
                // far better than plain IC(0).
                let omega = 0.95;
                let n = a.n;
                let mut l_diag = vec![0.0; n];
                let mut l_off = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
                for i in 0..n {
                    let mut d = a.diag[i];
                    for ax in 0..3 {
                        let s = a.strides[ax];
                        if i >= s {
                            let j = i - s;
                            let lj = l_off[ax][j];
                            d -= lj * lj;
                            // Dropped fill from row j toward i's other-axis
                            // neighbors.
                            for ax2 in 0..3 {
                                if ax2 != ax {
                                    d -= omega * (lj * l_off[ax2][j]).abs();
                                }
                            }
                        }
                    }
                    // Guard against breakdown at extreme contrast.
                    let ld = d.max(a.diag[i] * 1e-4).max(1e-300).sqrt();
                    l_diag[i] = ld;
                    for ax in 0..3 {
                        if i + a.strides[ax] < n {
                            l_off[ax][i] = a.off[ax][i] / ld;
                        }
                    }
                }
                let mut row_sum_total = 0.0;
                for i in 0..n {
                    row_sum_total += a.diag[i];
                    for ax in 0..3 {
                        row_sum_total += 2.0 * a.off[ax][i];
                    }
                }
                Precond::Ic0 {
                    l_diag,
                    l_off,
                    strides: a.strides,
                    inv_coarse: if row_sum_total > 0.0 {
                        1.0 / row_sum_total
                    } else {
                        0.0
                    },
                }
            }
        }
    }

    fn apply(&self, r: &[f64], z: &mut [f64], scratch: &mut [f64]) {
        match self {
            Precond::Jacobi { inv_diag } => {
                for i in 0..r.len() {
                    z[i] = r[i] * inv_diag[i];
                }
            }
            Precond::Ic0 {
                l_diag,
                l_off,
                strides,
                inv_coarse,
            } => {
                let n = r.len();
                // Forward solve L w = r.
                for i in 0..n {
                    let mut acc = r[i];
                    for ax in 0..3 {
                        let s = strides[ax];
                        if i >= s {
                            acc -= l_off[ax][i - s] * scratch[i - s];
                        }
                    }
                    scratch[i] = acc / l_diag[i];
                }
                // Backward solve L^T z = w.
                for i in (0..n).rev() {
                    let mut acc = scratch[i];
                    for ax in 0..3 {
                        let s = strides[ax];
                        if i + s < n {
                            acc -= l_off[ax][i] * z[i + s];
                        }
                    }
                    z[i] = acc / l_diag[i];
                }
                if *inv_coarse > 0.0 {
                    let shift: f64 = r.iter().sum::<f64>() * inv_coarse;
                    for v in z.iter_mut() {
                        *v += shift;
                    }
                }
            }
        }
    }
}

/// Solve `A x = b`, warm-started from the value in `x`. Tolerance is
/// relative to `||b||` (absolute when `b` is zero).
pub fn solve(
    a: &StencilMatrix,
    b: &[f64],
    x: &mut [f64],
    kind: Preconditioner,
    tol: f64,
    max_iters: usize,
) -> Result<usize> {
    let n = a.n;
    let pre = Precond::build(a, kind);

    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut ap = vec![0.0; n];
    let mut scratch = vec![0.0; n];

    a.mul(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let b_norm = norm(b);
    let target = if b_norm > 0.0 { tol * b_norm } else { tol };
    if norm(&r) <= target {
        return Ok(0);
    }

    pre.apply(&r, &mut z, &mut scratch);
    p.copy_from_slice(&z);
    let mut rz = dot(&r, &z);

    for it in 1..=max_iters {
        a.mul(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::SolverDiverged {
                residual: norm(&r),
                iters: it,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if norm(&r) <= target {
            return Ok(it);
        }
        pre.apply(&r, &mut z, &mut scratch);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SolverDiverged {
        residual: norm(&r),
        iters: max_iters,
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize) -> StencilMatrix {
        let mut a = StencilMatrix::zeros(n, [1, n, n]);
        for i in 0..n {
            a.diag[i] = 2.0 + 0.01;
            if i + 1 < n {
                a.off[0][i] = -1.0;
            }
        }
        a
    }

    #[test]
    fn solves_poisson_line() {
        for kind in [Preconditioner::Jacobi, Preconditioner::Ic0] {
            let n = 64;
            let a = laplacian_1d(n);
            let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.1).sin()).collect();
            let mut x = vec![0.0; n];
            solve(&a, &b, &mut x, kind, 1e-12, 1000).unwrap();

            let mut ax = vec![0.0; n];
            a.mul(&x, &mut ax);
            for i in 0..n {
                assert!((ax[i] - b[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn warm_start_zero_rhs() {
        let a = laplacian_1d(16);
        let b = vec![0.0; 16];
        let mut x = vec![0.0; 16];
        let iters = solve(&a, &b, &mut x, Preconditioner::Ic0, 1e-12, 100).unwrap();
        assert_eq!(iters, 0);
        assert!(x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn reports_nonconvergence() {
        let a = laplacian_1d(64);
        let b = vec![1.0; 64];
        let mut x = vec![0.0; 64];
        let err = solve(&a, &b, &mut x, Preconditioner::Jacobi, 1e-14, 2).unwrap_err();
        match err {
            Error::SolverDiverged { residual, iters } => {
                assert!(residual > 0.0);
                assert_eq!(iters, 2);
            }
            other => panic!("unexpected error {other}"),
        }
    }
}
