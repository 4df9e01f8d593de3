//! Hierarchical Bayesian history matching for geological CO2 storage.
//!
//! The crate is organized around the stages of the workflow:
//!
//! * [`geomodel`] — metaparameter-conditioned Gaussian geomodels: stationary
//!   field sampling, PCA dimension reduction, and permeability/porosity
//!   assembly.
//! * [`flowproxy`] — a deterministic two-phase (CO2/brine) flow proxy on the
//!   storage-aquifer grid, plus observation extraction and pressure
//!   normalization.
//! * [`likelihood`] — error budgets, synthetic observed data, error metrics,
//!   and the Gaussian log-likelihood.
//! * [`mcmc`] — the noncentered pCN-within-Gibbs sampler with convergence
//!   diagnostics, trace recording, and checkpoint/restore.
//! * [`sensitivity`] — variance-based total-effect Sobol indices over the
//!   metaparameters and the (grouped) latent field.
//! * [`analysis`] — ensemble percentile envelopes, cross-covariances, and
//!   representative-member selection via k-means/k-medoids.
//!
//! All randomized operations take explicit seeds or RNGs and are
//! deterministic; immutable products (grids, bases) are safe to share across
//! threads.

pub mod analysis;
pub mod error;
pub mod flowproxy;
pub mod geomodel;
pub mod grid;
pub mod likelihood;
pub mod mcmc;
pub mod provenance;
pub mod sensitivity;

pub use error::{Error, Result};
pub use grid::GridSpec;

/// Crate version, embedded in provenance headers.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
