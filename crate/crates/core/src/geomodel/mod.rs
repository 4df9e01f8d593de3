//! Metaparameter-conditioned geomodels.
//!
//! A geological scenario is defined by the metaparameters of Eq.-style
//! `[mu_logk, sigma_logk, a_r, d, e]` (horizontal correlation length is
//! carried but held fixed). Standard multi-Gaussian fields are mapped to
//! per-cell permeability and porosity through the scenario parameters.

mod field;
mod pca;

pub use field::{sample_gaussian_field, GaussianFieldSampler};
pub use pca::{build_pca_basis, build_pca_basis_with_modes, pca_to_field, project_to_latent,
              write_field_csv, PcaBasis};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Permeability cutoffs in millidarcy.
pub const K_MIN_MD: f64 = 1e-4;
pub const K_MAX_MD: f64 = 1e4;
/// Porosity cutoffs.
pub const PHI_MIN: f64 = 0.05;
pub const PHI_MAX: f64 = 0.4;

/// Number of metaparameters sampled by MCMC.
pub const N_META: usize = 5;
/// Component names of the sampling vector. The anisotropy ratio is carried
/// as log10(a_r) in vector space.
pub const META_NAMES: [&str; N_META] = ["mu_logk", "sigma_logk", "log10_ar", "d", "e"];

/// Exponential variogram with practical-range convention
/// `C(h) = exp(-3 (h_h/l_h + h_v/l_v))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramSpec {
    /// Horizontal correlation length in meters.
    pub l_h: f64,
    /// Vertical correlation length in meters.
    pub l_v: f64,
}

impl VariogramSpec {
    pub fn new(l_h: f64, l_v: f64) -> Result<Self> {
        if !(l_h > 0.0 && l_v > 0.0) {
            return Err(Error::invalid("correlation lengths must be > 0"));
        }
        Ok(VariogramSpec { l_h, l_v })
    }

    /// Covariance between two points separated by (hx, hy, hz) meters.
    #[inline]
    pub fn covariance(&self, hx: f64, hy: f64, hz: f64) -> f64 {
        let h_h = (hx * hx + hy * hy).sqrt();
        (-3.0 * (h_h / self.l_h + hz.abs() / self.l_v)).exp()
    }
}

/// Scenario-defining metaparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metaparameters {
    /// Mean of ln-permeability (k in md).
    pub mu_logk: f64,
    /// Standard deviation of ln-permeability.
    pub sigma_logk: f64,
    /// Permeability anisotropy ratio k_v/k, in (0, 1].
    pub a_r: f64,
    /// Porosity-permeability slope.
    pub d: f64,
    /// Porosity-permeability intercept.
    pub e: f64,
    /// Horizontal correlation length (m); carried but excluded from MCMC.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_h: Option<f64>,
}

impl Metaparameters {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_logk < 0.0 {
            return Err(Error::invalid("sigma_logk must be >= 0"));
        }
        if !(self.a_r > 0.0 && self.a_r <= 1.0) {
            return Err(Error::invalid("a_r must be in (0, 1]"));
        }
        Ok(())
    }

    /// Sampling-space vector: [mu_logk, sigma_logk, log10(a_r), d, e].
    pub fn to_vector(&self) -> [f64; N_META] {
        [
            self.mu_logk,
            self.sigma_logk,
            self.a_r.log10(),
            self.d,
            self.e,
        ]
    }

    pub fn from_vector(v: &[f64; N_META], l_h: Option<f64>) -> Self {
        Metaparameters {
            mu_logk: v[0],
            sigma_logk: v[1],
            a_r: 10f64.powf(v[2]),
            d: v[3],
            e: v[4],
            l_h,
        }
    }
}

/// One-dimensional prior family for a metaparameter.
///
/// `LogUniform` takes natural-space bounds; in sampling space the component
/// is carried as log10 and the exponent is drawn uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dist {
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, std: f64 },
}

impl Dist {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Dist::Uniform { lo, hi } => {
                if lo > hi {
                    return Err(Error::invalid("uniform prior requires lo <= hi"));
                }
            }
            Dist::LogUniform { lo, hi } => {
                if !(lo > 0.0) || lo > hi {
                    return Err(Error::invalid("log-uniform prior requires 0 < lo <= hi"));
                }
            }
            Dist::Gaussian { std, .. } => {
                if !(std > 0.0) {
                    return Err(Error::invalid("gaussian prior requires std > 0"));
                }
            }
        }
        Ok(())
    }

    /// Support of the sampling-space coordinate (log10 space for LogUniform;
    /// mean +/- 4 std for Gaussian, used for histogram binning).
    pub fn vector_support(&self) -> (f64, f64) {
        match *self {
            Dist::Uniform { lo, hi } => (lo, hi),
            Dist::LogUniform { lo, hi } => (lo.log10(), hi.log10()),
            Dist::Gaussian { mean, std } => (mean - 4.0 * std, mean + 4.0 * std),
        }
    }

    /// Draw the sampling-space coordinate.
    pub fn sample_vector<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Dist::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            Dist::LogUniform { lo, hi } => {
                let (a, b) = (lo.log10(), hi.log10());
                a + (b - a) * rng.random::<f64>()
            }
            Dist::Gaussian { mean, std } => {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                mean + std * z
            }
        }
    }

    /// Unnormalized log-density of the sampling-space coordinate
    /// (-inf outside bounded supports). Only ratios are ever used.
    pub fn log_density_vector(&self, v: f64) -> f64 {
        match *self {
            Dist::Uniform { lo, hi } => {
                if v >= lo && v <= hi {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Dist::LogUniform { lo, hi } => {
                let (a, b) = (lo.log10(), hi.log10());
                if v >= a && v <= b {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Dist::Gaussian { mean, std } => {
                let z = (v - mean) / std;
                -0.5 * z * z
            }
        }
    }

    /// Quantile of the sampling-space coordinate, u in [0, 1).
    pub fn quantile_vector(&self, u: f64) -> f64 {
        match *self {
            Dist::Uniform { lo, hi } => lo + (hi - lo) * u,
            Dist::LogUniform { lo, hi } => {
                let (a, b) = (lo.log10(), hi.log10());
                a + (b - a) * u
            }
            Dist::Gaussian { mean, std } => {
                use statrs::distribution::ContinuousCDF;
                let n = statrs::distribution::Normal::new(mean, std).expect("valid gaussian");
                n.inverse_cdf(u.clamp(f64::MIN_POSITIVE, 1.0 - 1e-16))
            }
        }
    }

    /// Default random-walk proposal std: 1/16 of the sampling-space prior
    /// range (4-std window either side of the mean for Gaussians).
    pub fn default_proposal_std(&self) -> f64 {
        let (lo, hi) = self.vector_support();
        (hi - lo) / 16.0
    }
}

/// Per-metaparameter priors, in the order of [`META_NAMES`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub components: [Dist; N_META],
}

impl PriorSpec {
    /// Flow-simulation defaults: mu_logk ~ U(1.5, 4), sigma_logk ~ U(1, 2.5),
    /// log10(a_r) ~ U(-2, 0), d ~ U(0.02, 0.04), e ~ U(0.05, 0.1).
    pub fn table_defaults() -> Self {
        PriorSpec {
            components: [
                Dist::Uniform { lo: 1.5, hi: 4.0 },
                Dist::Uniform { lo: 1.0, hi: 2.5 },
                Dist::LogUniform { lo: 1e-2, hi: 1.0 },
                Dist::Uniform { lo: 0.02, hi: 0.04 },
                Dist::Uniform { lo: 0.05, hi: 0.1 },
            ],
        }
    }

    /// Gaussian priors centered on the mid-range of the uniform defaults,
    /// with stds 0.5, 0.5, 0.25 (log10 a_r), 0.005 and 0.017.
    pub fn gaussian_defaults() -> Self {
        PriorSpec {
            components: [
                Dist::Gaussian { mean: 2.75, std: 0.5 },
                Dist::Gaussian { mean: 1.75, std: 0.5 },
                Dist::Gaussian { mean: -1.0, std: 0.25 },
                Dist::Gaussian { mean: 0.03, std: 0.005 },
                Dist::Gaussian { mean: 0.075, std: 0.017 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.components {
            c.validate()?;
        }
        Ok(())
    }

    pub fn sample_vector<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; N_META] {
        let mut v = [0.0; N_META];
        for (vi, c) in v.iter_mut().zip(self.components.iter()) {
            *vi = c.sample_vector(rng);
        }
        v
    }

    /// Sum of per-component sampling-space log-densities.
    pub fn log_density_vector(&self, v: &[f64; N_META]) -> f64 {
        v.iter()
            .zip(self.components.iter())
            .map(|(x, c)| c.log_density_vector(*x))
            .sum()
    }

    pub fn default_proposal_stds(&self) -> [f64; N_META] {
        let mut s = [0.0; N_META];
        for (si, c) in s.iter_mut().zip(self.components.iter()) {
            *si = c.default_proposal_std();
        }
        s
    }
}

/// Independent draws per component; log-uniform components draw the exponent
/// uniformly.
pub fn sample_prior<R: Rng + ?Sized>(prior: &PriorSpec, rng: &mut R) -> Metaparameters {
    let v = prior.sample_vector(rng);
    Metaparameters::from_vector(&v, None)
}

/// Per-cell rock properties on the storage-aquifer grid. The anisotropy
/// ratio is uniform over cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Geomodel {
    /// Horizontal permeability per cell, md.
    pub k: Vec<f64>,
    /// Porosity per cell, fraction.
    pub phi: Vec<f64>,
    /// Anisotropy ratio k_v/k, constant over cells.
    pub a_r: f64,
}

/// Map a standard multi-Gaussian field to rock properties:
/// `k_i = exp(sigma_logk * y_i + mu_logk)` clamped to [1e-4, 1e4] md, then
/// `phi_i = d * ln(k_i) + e` clamped to [0.05, 0.4]. Porosity uses the
/// clamped permeability.
pub fn assemble_geomodel(y: &[f64], theta: &Metaparameters) -> Result<Geomodel> {
    theta.validate()?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("gaussian field contains non-finite values"));
    }
    let mut k = Vec::with_capacity(y.len());
    let mut phi = Vec::with_capacity(y.len());
    for &yi in y {
        let ki = (theta.sigma_logk * yi + theta.mu_logk).exp().clamp(K_MIN_MD, K_MAX_MD);
        let pi = (theta.d * ki.ln() + theta.e).clamp(PHI_MIN, PHI_MAX);
        k.push(ki);
        phi.push(pi);
    }
    Ok(Geomodel {
        k,
        phi,
        a_r: theta.a_r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn theta(mu: f64, sigma: f64, a_r: f64, d: f64, e: f64) -> Metaparameters {
        Metaparameters {
            mu_logk: mu,
            sigma_logk: sigma,
            a_r,
            d,
            e,
            l_h: None,
        }
    }

    #[test]
    fn assemble_zero_variance() {
        let y = vec![0.3, -1.2, 4.0];
        let m = assemble_geomodel(&y, &theta(2.0, 0.0, 0.5, 0.03, 0.07)).unwrap();
        for ki in &m.k {
            assert!((ki - 2f64.exp()).abs() < 1e-12, "k = {ki}");
        }
    }

    #[test]
    fn assemble_slope_free_porosity() {
        let y = vec![0.0, 1.0, -2.0];
        let m = assemble_geomodel(&y, &theta(3.0, 1.0, 0.1, 0.0, 0.07)).unwrap();
        assert!(m.phi.iter().all(|&p| (p - 0.07).abs() < 1e-15));
    }

    #[test]
    fn assemble_clamps_then_derives_porosity() {
        // Raw k = exp(2.5*10 + 4) = e^29 md, clamped to 1e4; porosity from
        // the clamped value.
        let m = assemble_geomodel(&[10.0], &theta(4.0, 2.5, 0.5, 0.03, 0.07)).unwrap();
        assert_eq!(m.k[0], K_MAX_MD);
        let want_phi = (0.03 * K_MAX_MD.ln() + 0.07).clamp(PHI_MIN, PHI_MAX);
        assert_eq!(m.phi[0], want_phi);
    }

    #[test]
    fn assemble_monotone_in_mu() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let y: Vec<f64> = (0..64)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let lo = assemble_geomodel(&y, &theta(2.0, 1.4, 0.5, 0.03, 0.07)).unwrap();
        let hi = assemble_geomodel(&y, &theta(2.6, 1.4, 0.5, 0.03, 0.07)).unwrap();
        for (a, b) in lo.k.iter().zip(hi.k.iter()) {
            assert!(b >= a);
        }
    }

    #[test]
    fn assemble_respects_cutoffs() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let y: Vec<f64> = (0..256)
            .map(|_| 6.0 * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let m = assemble_geomodel(&y, &theta(4.0, 2.5, 1.0, 0.04, 0.1)).unwrap();
        assert!(m.k.iter().all(|&k| (K_MIN_MD..=K_MAX_MD).contains(&k)));
        assert!(m.phi.iter().all(|&p| (PHI_MIN..=PHI_MAX).contains(&p)));
    }

    #[test]
    fn prior_uniform_mean() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let d = Dist::Uniform { lo: 1.5, hi: 4.0 };
        let n = 100_000;
        let mean = (0..n).map(|_| d.sample_vector(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 2.75).abs() < 0.02, "mean = {mean}");
    }

    #[test]
    fn prior_log_uniform_degenerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let d = Dist::LogUniform { lo: 0.3, hi: 0.3 };
        for _ in 0..10 {
            let v = d.sample_vector(&mut rng);
            assert!((v - 0.3f64.log10()).abs() < 1e-14);
        }
    }

    #[test]
    fn prior_gaussian_matches_si_defaults() {
        let p = PriorSpec::gaussian_defaults();
        match p.components[0] {
            Dist::Gaussian { mean, std } => {
                assert_eq!(mean, 2.75);
                assert_eq!(std, 0.5);
            }
            _ => panic!("expected gaussian"),
        }
        match p.components[2] {
            Dist::Gaussian { mean, std } => {
                assert_eq!(mean, -1.0);
                assert_eq!(std, 0.25);
            }
            _ => panic!("expected gaussian"),
        }
    }

    #[test]
    fn proposal_std_is_sixteenth_of_range() {
        let p = PriorSpec::table_defaults();
        let s = p.default_proposal_stds();
        assert!((s[0] - 2.5 / 16.0).abs() < 1e-15);
        assert!((s[2] - 2.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn vector_roundtrip_exponentiates_ar() {
        let t = theta(2.2, 1.1, 0.56, 0.02, 0.084);
        let v = t.to_vector();
        assert!((v[2] - 0.56f64.log10()).abs() < 1e-15);
        let back = Metaparameters::from_vector(&v, None);
        assert!((back.a_r - 0.56).abs() < 1e-12);
    }

    #[test]
    fn sampled_priors_stay_in_support() {
        let p = PriorSpec::table_defaults();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let t = sample_prior(&p, &mut rng);
            t.validate().unwrap();
            assert!((1.5..=4.0).contains(&t.mu_logk));
            assert!((0.01..=1.0).contains(&t.a_r));
        }
    }
}
