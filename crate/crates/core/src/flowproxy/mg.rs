//! Aggregation multigrid preconditioner for the pressure stencil.
//!
//! Levels agglomerate 2x2x2 cell blocks with piecewise-constant transfer and
//! a Galerkin coarse operator, which keeps every level a 7-point stencil on
//! a smaller structured grid. Damped-Jacobi smoothing keeps the V-cycle
//! symmetric so it is a valid CG preconditioner. Plain aggregation is not an
//! optimal multigrid, but as a preconditioner it handles both the strong
//! permeability contrast and the near-constant null mode of closed no-flow
//! boxes far better than incomplete factorizations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::linsolve::StencilMatrix;

const COARSEST_N: usize = 64;
const JACOBI_OMEGA: f64 = 0.7;
const N_SMOOTH: usize = 2;

struct Level {
    a: StencilMatrix,
    dims: [usize; 3],
    inv_diag: Vec<f64>,
    // Scratch buffers.
    z: Vec<f64>,
    r: Vec<f64>,
    tmp: Vec<f64>,
}

pub struct MgPrecond {
    levels: Vec<Level>,
    coarse: Cholesky<f64, Dyn>,
    coarse_rhs: DVector<f64>,
}

fn coarsen_dims(d: [usize; 3]) -> [usize; 3] {
    [d[0].div_ceil(2), d[1].div_ceil(2), d[2].div_ceil(2)]
}

fn galerkin_coarse(a: &StencilMatrix, dims: [usize; 3]) -> (StencilMatrix, [usize; 3]) {
    let cd = coarsen_dims(dims);
    let mut ac = StencilMatrix::zeros(cd[0] * cd[1] * cd[2], [1, cd[0], cd[0] * cd[1]]);
    let cidx = |ix: usize, iy: usize, iz: usize| (ix / 2) + cd[0] * ((iy / 2) + cd[1] * (iz / 2));

    for iz in 0..dims[2] {
        for iy in 0..dims[1] {
            for ix in 0..dims[0] {
                let f = ix + dims[0] * (iy + dims[1] * iz);
                let c = cidx(ix, iy, iz);
                ac.diag[c] += a.diag[f];
                for (ax, (dx, dy, dz)) in
                    [(1usize, 0usize, 0usize), (0, 1, 0), (0, 0, 1)].iter().enumerate()
                {
                    let (jx, jy, jz) = (ix + dx, iy + dy, iz + dz);
                    if jx >= dims[0] || jy >= dims[1] || jz >= dims[2] {
                        continue;
                    }
                    let off = a.off[ax][f];
                    if off == 0.0 {
                        continue;
                    }
                    let cj = cidx(jx, jy, jz);
                    if cj == c {
                        // Both endpoints in the same aggregate: fold the
                        // symmetric pair into the coarse diagonal.
                        ac.diag[c] += 2.0 * off;
                    } else {
                        // Fine neighbors differ by one coarse step along ax.
                        ac.off[ax][c] += off;
                    }
                }
            }
        }
    }
    (ac, cd)
}

impl MgPrecond {
    pub fn build(a: &StencilMatrix, dims: [usize; 3]) -> Self {
        let mut levels = Vec::new();
        let mut cur = a.clone();
        let mut cur_dims = dims;
        loop {
            let n = cur.n;
            let inv_diag = cur.diag.iter().map(|d| 1.0 / d.max(1e-300)).collect();
            let next = if n > COARSEST_N {
                Some(galerkin_coarse(&cur, cur_dims))
            } else {
                None
            };
            levels.push(Level {
                a: cur,
                dims: cur_dims,
                inv_diag,
                z: vec![0.0; n],
                r: vec![0.0; n],
                tmp: vec![0.0; n],
            });
            match next {
                Some((ac, cd)) => {
                    cur = ac;
                    cur_dims = cd;
                }
                None => break,
            }
        }

        let bottom = levels.last().unwrap();
        let n = bottom.a.n;
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            dense[(i, i)] = bottom.a.diag[i];
            for ax in 0..3 {
                let s = bottom.a.strides[ax];
                if i + s < n {
                    let c = bottom.a.off[ax][i];
                    dense[(i, i + s)] = c;
                    dense[(i + s, i)] = c;
                }
            }
        }
        let coarse = dense
            .cholesky()
            .expect("coarsest pressure operator must stay SPD");
        MgPrecond {
            levels,
            coarse,
            coarse_rhs: DVector::zeros(n),
        }
    }

    /// z = V-cycle(r) on the finest level.
    pub fn apply(&mut self, r: &[f64], z: &mut [f64]) {
        self.levels[0].r.copy_from_slice(r);
        self.vcycle(0);
        z.copy_from_slice(&self.levels[0].z);
    }

    fn vcycle(&mut self, l: usize) {
        if l + 1 == self.levels.len() {
            let lev = &mut self.levels[l];
            for (dst, src) in lev.r.iter().zip(self.coarse_rhs.iter_mut()) {
                *src = *dst;
            }
            let sol = self.coarse.solve(&self.coarse_rhs);
            for (dst, src) in lev.z.iter_mut().zip(sol.iter()) {
                *dst = *src;
            }
            return;
        }

        {
            let lev = &mut self.levels[l];
            lev.z.iter_mut().for_each(|v| *v = 0.0);
            smooth(lev, N_SMOOTH);
        }

        // Restrict the residual: coarse value = sum over the aggregate.
        {
            let (fine, coarse) = self.levels.split_at_mut(l + 1);
            let fl = &mut fine[l];
            let cl = &mut coarse[0];
            fl.a.mul(&fl.z, &mut fl.tmp);
            cl.r.iter_mut().for_each(|v| *v = 0.0);
            let d = fl.dims;
            let cd = cl.dims;
            for iz in 0..d[2] {
                for iy in 0..d[1] {
                    for ix in 0..d[0] {
                        let f = ix + d[0] * (iy + d[1] * iz);
                        let c = (ix / 2) + cd[0] * ((iy / 2) + cd[1] * (iz / 2));
                        cl.r[c] += fl.r[f] - fl.tmp[f];
                    }
                }
            }
        }

        self.vcycle(l + 1);

        {
            let (fine, coarse) = self.levels.split_at_mut(l + 1);
            let fl = &mut fine[l];
            let cl = &coarse[0];
            let d = fl.dims;
            let cd = cl.dims;
            for iz in 0..d[2] {
                for iy in 0..d[1] {
                    for ix in 0..d[0] {
                        let f = ix + d[0] * (iy + d[1] * iz);
                        let c = (ix / 2) + cd[0] * ((iy / 2) + cd[1] * (iz / 2));
                        fl.z[f] += cl.z[c];
                    }
                }
            }
            smooth(fl, N_SMOOTH);
        }
    }
}

fn smooth(lev: &mut Level, sweeps: usize) {
    for _ in 0..sweeps {
        lev.a.mul(&lev.z, &mut lev.tmp);
        for i in 0..lev.a.n {
            lev.z[i] += JACOBI_OMEGA * lev.inv_diag[i] * (lev.r[i] - lev.tmp[i]);
        }
    }
}
