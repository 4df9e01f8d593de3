//! PCA parameterization of the multi-Gaussian fields.
//!
//! The basis is built by SVD of a centered training ensemble. Columns of the
//! basis matrix are left singular vectors scaled by `sv / sqrt(n_r - 1)`, so
//! a standard-normal latent vector reproduces the ensemble covariance in the
//! retained subspace.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const MAGIC: &[u8; 16] = b"CO2HM.PCABASIS.1";

/// Truncated PCA basis mapping latent vectors to fields.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    /// n_s x n_d basis matrix, row-major.
    pub phi: Vec<f64>,
    /// Ensemble mean field, length n_s.
    pub ybar: Vec<f64>,
    /// Retained singular values, length n_d.
    pub sv: Vec<f64>,
    /// Retained energy fraction (sum of retained sv^2 over sum of all sv^2).
    pub energy_fraction: f64,
    pub n_s: usize,
    pub n_d: usize,
}

impl PcaBasis {
    #[inline]
    fn phi_at(&self, row: usize, col: usize) -> f64 {
        self.phi[row * self.n_d + col]
    }

    /// Column j as a vector (test/diagnostic use).
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_s).map(|i| self.phi_at(i, j)).collect()
    }

    /// Persist in the fixed binary layout: 16-byte magic, little-endian u64
    /// n_s and n_d, then ybar, sv and Phi (row-major) as little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(self.n_s as u64).to_le_bytes())?;
        w.write_all(&(self.n_d as u64).to_le_bytes())?;
        for v in self.ybar.iter().chain(self.sv.iter()).chain(self.phi.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Load a basis written by [`PcaBasis::save`]. The binary layout does not
    /// carry the energy fraction; it is restored from the metadata sidecar by
    /// callers that have one, and defaults to 1.0 here.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 16];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: "bad magic".into(),
            });
        }
        let n_s = read_u64(&mut r)? as usize;
        let n_d = read_u64(&mut r)? as usize;
        let ybar = read_f64s(&mut r, n_s)?;
        let sv = read_f64s(&mut r, n_d)?;
        let phi = read_f64s(&mut r, n_s.checked_mul(n_d).ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            reason: "dimension overflow".into(),
        })?)?;
        Ok(PcaBasis {
            phi,
            ybar,
            sv,
            energy_fraction: 1.0,
            n_s,
            n_d,
        })
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Build a basis retaining the smallest mode count whose energy reaches
/// `energy_target`. Rank-deficient ensembles truncate at numerical rank.
pub fn build_pca_basis(realizations: &[Vec<f64>], energy_target: f64) -> Result<PcaBasis> {
    if !(energy_target > 0.0 && energy_target <= 1.0) {
        return Err(Error::invalid("energy_target must be in (0, 1]"));
    }
    build_inner(realizations, ModeSelect::Energy(energy_target))
}

/// Build a basis with an explicit mode count; errors if the ensemble cannot
/// support that many modes.
pub fn build_pca_basis_with_modes(realizations: &[Vec<f64>], n_d: usize) -> Result<PcaBasis> {
    build_inner(realizations, ModeSelect::Count(n_d))
}

enum ModeSelect {
    Energy(f64),
    Count(usize),
}

fn build_inner(realizations: &[Vec<f64>], select: ModeSelect) -> Result<PcaBasis> {
    let n_r = realizations.len();
    if n_r < 2 {
        return Err(Error::invalid("need at least 2 realizations"));
    }
    let n_s = realizations[0].len();
    if realizations.iter().any(|r| r.len() != n_s) {
        return Err(Error::invalid("realizations have inconsistent lengths"));
    }

    let mut ybar = vec![0.0; n_s];
    for r in realizations {
        for (m, v) in ybar.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    for m in ybar.iter_mut() {
        *m /= n_r as f64;
    }

    // Centered ensemble, columns are realizations.
    let mut y = DMatrix::<f64>::zeros(n_s, n_r);
    for (j, r) in realizations.iter().enumerate() {
        for i in 0..n_s {
            y[(i, j)] = r[i] - ybar[i];
        }
    }

    // Economy SVD through the n_r x n_r Gram matrix.
    let gram = y.transpose() * &y;
    let eig = nalgebra::SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n_r).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    // Centering cancellation leaves O(eps^2) energy for identical inputs;
    // measure energy against the uncentered ensemble scale to detect that.
    let uncentered_ss: f64 = realizations
        .iter()
        .flat_map(|r| r.iter())
        .map(|v| v * v)
        .sum();
    let mut total_energy: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if total_energy < uncentered_ss.max(f64::MIN_POSITIVE) * 1e-24 {
        total_energy = 0.0;
    }
    let max_ev = order.first().map(|&i| eig.eigenvalues[i].max(0.0)).unwrap_or(0.0);
    let rank_tol = max_ev * 1e-12;

    let rank = if total_energy == 0.0 {
        0
    } else {
        order
            .iter()
            .take_while(|&&i| eig.eigenvalues[i] > rank_tol && eig.eigenvalues[i] > 0.0)
            .count()
    };

    let n_d = match select {
        ModeSelect::Count(n) => {
            if n > rank {
                return Err(Error::invalid(format!(
                    "requested {n} modes but the ensemble supports only {rank}"
                )));
            }
            n
        }
        ModeSelect::Energy(target) => {
            if total_energy <= 0.0 {
                // Identical realizations: the mean carries everything.
                0
            } else {
                let mut acc = 0.0;
                let mut n = 0;
                for &i in order.iter().take(rank) {
                    acc += eig.eigenvalues[i].max(0.0);
                    n += 1;
                    if acc / total_energy >= target {
                        break;
                    }
                }
                n
            }
        }
    };

    let mut sv = Vec::with_capacity(n_d);
    let mut phi = vec![0.0; n_s * n_d];
    let scale = 1.0 / ((n_r - 1) as f64).sqrt();
    for (col, &i) in order.iter().take(n_d).enumerate() {
        let s = eig.eigenvalues[i].max(0.0).sqrt();
        sv.push(s);
        // Column of Phi = Y v_i / sqrt(n_r - 1) = u_i * s / sqrt(n_r - 1).
        let v = eig.eigenvectors.column(i);
        let yv: DVector<f64> = &y * v;
        for row in 0..n_s {
            phi[row * n_d + col] = yv[row] * scale;
        }
    }

    let retained: f64 = sv.iter().map(|s| s * s).sum();
    let energy_fraction = if total_energy > 0.0 {
        (retained / total_energy).min(1.0)
    } else {
        1.0
    };

    Ok(PcaBasis {
        phi,
        ybar,
        sv,
        energy_fraction,
        n_s,
        n_d,
    })
}

/// `y = Phi xi + ybar`.
pub fn pca_to_field(basis: &PcaBasis, xi: &[f64]) -> Result<Vec<f64>> {
    if xi.len() != basis.n_d {
        return Err(Error::DimensionMismatch {
            expected: basis.n_d,
            got: xi.len(),
            context: "latent vector vs basis modes".into(),
        });
    }
    let mut y = basis.ybar.clone();
    for row in 0..basis.n_s {
        let mut acc = 0.0;
        let base = row * basis.n_d;
        for (j, x) in xi.iter().enumerate() {
            acc += basis.phi[base + j] * x;
        }
        y[row] += acc;
    }
    Ok(y)
}

/// Least-squares latent coordinates of a field (columns are orthogonal, so
/// this is a per-column projection). Inverse of [`pca_to_field`] on the
/// retained subspace.
pub fn project_to_latent(basis: &PcaBasis, field: &[f64]) -> Result<Vec<f64>> {
    if field.len() != basis.n_s {
        return Err(Error::DimensionMismatch {
            expected: basis.n_s,
            got: field.len(),
            context: "field vs basis cells".into(),
        });
    }
    let mut xi = vec![0.0; basis.n_d];
    let mut col_norm2 = vec![0.0; basis.n_d];
    for row in 0..basis.n_s {
        let centered = field[row] - basis.ybar[row];
        let base = row * basis.n_d;
        for j in 0..basis.n_d {
            let p = basis.phi[base + j];
            xi[j] += p * centered;
            col_norm2[j] += p * p;
        }
    }
    for (x, n2) in xi.iter_mut().zip(col_norm2.iter()) {
        if *n2 > 0.0 {
            *x /= n2;
        }
    }
    Ok(xi)
}

/// Export a field as `cell_index,value` CSV with an optional provenance
/// header (lines starting with '#').
pub fn write_field_csv(path: &Path, field: &[f64], header: Option<&str>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    if let Some(h) = header {
        writeln!(w, "{h}")?;
    }
    writeln!(w, "cell,value")?;
    for (i, v) in field.iter().enumerate() {
        writeln!(w, "{i},{v}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomodel::{GaussianFieldSampler, VariogramSpec};
    use crate::grid::GridSpec;

    #[test]
    fn two_realization_hand_svd() {
        // Realizations [1,1] and [-1,-1]: ybar = 0, one mode, singular value 2,
        // column proportional to [1,1]/sqrt(2) with norm sv/sqrt(n_r-1) = 2.
        let basis = build_pca_basis(&[vec![1.0, 1.0], vec![-1.0, -1.0]], 1.0).unwrap();
        assert_eq!(basis.n_d, 1);
        assert!(basis.ybar.iter().all(|v| v.abs() < 1e-12));
        assert!((basis.sv[0] - 2.0).abs() < 1e-12);
        let col = basis.column(0);
        assert!((col[0] - col[1]).abs() < 1e-12);
        assert!((col[0].abs() - 2.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((basis.energy_fraction - 1.0).abs() < 1e-12);

        // xi = [1] reproduces ybar + column.
        let y = pca_to_field(&basis, &[1.0]).unwrap();
        assert!((y[0] - col[0]).abs() < 1e-12);

        // xi = 0 returns the mean exactly.
        let y0 = pca_to_field(&basis, &[0.0]).unwrap();
        assert_eq!(y0, basis.ybar);
    }

    #[test]
    fn identical_realizations_degenerate() {
        let f = vec![0.7, -0.2, 1.1];
        let basis = build_pca_basis(&[f.clone(), f.clone(), f.clone()], 0.95).unwrap();
        assert_eq!(basis.n_d, 0);
        for (a, b) in basis.ybar.iter().zip(f.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(basis.sv.is_empty());
    }

    #[test]
    fn mode_count_request_capped_by_rank() {
        let r = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert!(build_pca_basis_with_modes(&r, 2).is_err());
        let b = build_pca_basis_with_modes(&r, 1).unwrap();
        assert_eq!(b.n_d, 1);
    }

    #[test]
    fn affine_superposition() {
        let ens = training_ensemble(24);
        let basis = build_pca_basis(&ens, 0.9).unwrap();
        let n_d = basis.n_d;
        let xi1: Vec<f64> = (0..n_d).map(|i| (i as f64 * 0.37).sin()).collect();
        let xi2: Vec<f64> = (0..n_d).map(|i| (i as f64 * 0.11).cos()).collect();
        let sum: Vec<f64> = xi1.iter().zip(&xi2).map(|(a, b)| a + b).collect();

        let y1 = pca_to_field(&basis, &xi1).unwrap();
        let y2 = pca_to_field(&basis, &xi2).unwrap();
        let ys = pca_to_field(&basis, &sum).unwrap();
        for i in 0..basis.n_s {
            let lhs = ys[i];
            let rhs = y1[i] + y2[i] - basis.ybar[i];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let basis = build_pca_basis(&[vec![1.0, 1.0], vec![-1.0, -1.0]], 1.0).unwrap();
        assert!(pca_to_field(&basis, &[1.0, 2.0]).is_err());
    }

    fn training_ensemble(n_r: usize) -> Vec<Vec<f64>> {
        let grid = GridSpec::new(10, 10, 3, 150.0, 150.0, 5.0).unwrap();
        let vario = VariogramSpec::new(1500.0, 10.0).unwrap();
        let s = GaussianFieldSampler::new(grid, vario).unwrap();
        (0..n_r as u64).map(|seed| s.sample(seed)).collect()
    }

    #[test]
    fn reconstruction_energy_bound() {
        let ens = training_ensemble(40);
        let basis = build_pca_basis(&ens, 0.8).unwrap();
        assert!(basis.energy_fraction >= 0.8);
        assert!(basis.n_d < 39);

        // Aggregate training-set reconstruction error is bounded by the
        // discarded energy.
        let mut num = 0.0;
        let mut den = 0.0;
        for r in &ens {
            let xi = project_to_latent(&basis, r).unwrap();
            let back = pca_to_field(&basis, &xi).unwrap();
            for i in 0..basis.n_s {
                let centered = r[i] - basis.ybar[i];
                num += (back[i] - r[i]) * (back[i] - r[i]);
                den += centered * centered;
            }
        }
        let rel = (num / den).sqrt();
        let bound = (1.0 - basis.energy_fraction).sqrt() + 1e-6;
        assert!(rel <= bound, "rel {rel} bound {bound}");
    }

    #[test]
    fn columns_orthogonal_after_descaling() {
        let ens = training_ensemble(30);
        let basis = build_pca_basis(&ens, 0.99).unwrap();
        for a in 0..basis.n_d {
            for b in (a + 1)..basis.n_d {
                let mut dot = 0.0;
                for i in 0..basis.n_s {
                    dot += basis.phi_at(i, a) * basis.phi_at(i, b);
                }
                // Remove the singular-value scaling: u_a . u_b should vanish.
                let scale = basis.sv[a] * basis.sv[b] / (ens.len() as f64 - 1.0);
                assert!((dot / scale).abs() < 1e-8, "columns {a},{b}: {}", dot / scale);
            }
        }
    }

    #[test]
    fn latent_covariance_reproduced() {
        use rand::{Rng, SeedableRng};
        // With xi ~ N(0, I) the field covariance is Phi Phi^T; check a few
        // cell pairs empirically.
        let ens = training_ensemble(32);
        let basis = build_pca_basis(&ens, 0.95).unwrap();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(77);
        let n_draw = 10_000;
        let pairs = [(0usize, 1usize), (5, 6), (10, 40), (100, 101), (200, 230)];

        let mut sums = vec![0.0; basis.n_s];
        let mut prods = [0.0; 5];
        let mut draws: Vec<Vec<f64>> = Vec::with_capacity(n_draw);
        for _ in 0..n_draw {
            let xi: Vec<f64> = (0..basis.n_d)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            let y = pca_to_field(&basis, &xi).unwrap();
            for (s, v) in sums.iter_mut().zip(y.iter()) {
                *s += v;
            }
            draws.push(y);
        }
        let means: Vec<f64> = sums.iter().map(|s| s / n_draw as f64).collect();
        for y in &draws {
            for (k, (a, b)) in pairs.iter().enumerate() {
                prods[k] += (y[*a] - means[*a]) * (y[*b] - means[*b]);
            }
        }
        for (k, (a, b)) in pairs.iter().enumerate() {
            let emp = prods[k] / (n_draw as f64 - 1.0);
            let mut want = 0.0;
            for j in 0..basis.n_d {
                want += basis.phi_at(*a, j) * basis.phi_at(*b, j);
            }
            let rel = (emp - want).abs() / want.abs().max(1e-12);
            assert!(rel < 0.05, "pair {a},{b}: emp {emp} want {want}");
        }
    }

    #[test]
    fn binary_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.bin");
        let ens = training_ensemble(12);
        let basis = build_pca_basis(&ens, 0.9).unwrap();
        basis.save(&path).unwrap();
        let back = PcaBasis::load(&path).unwrap();
        assert_eq!(back.n_s, basis.n_s);
        assert_eq!(back.n_d, basis.n_d);
        assert_eq!(back.phi, basis.phi);
        assert_eq!(back.ybar, basis.ybar);
        assert_eq!(back.sv, basis.sv);
    }
}
