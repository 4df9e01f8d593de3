//! Deterministic two-phase flow proxy and observation handling.
//!
//! The proxy fills the forward-model slot of the history-matching loop: given
//! a geomodel it produces pressure and CO2 saturation on the aquifer grid at
//! the scheduled output times, from which monitoring-well observations are
//! extracted.

mod linsolve;
pub mod simulate;

pub use linsolve::Preconditioner;
pub use simulate::{simulate, SimOptions};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;

/// Unit conversions used throughout the proxy.
pub const MD_TO_M2: f64 = 9.869233e-16;
pub const YEAR_SECONDS: f64 = 3.1536e7;
pub const CP_TO_PAS: f64 = 1e-3;
pub const MPA_TO_PA: f64 = 1e6;
pub const GRAVITY: f64 = 9.81;

/// Output schedule used for full-horizon runs: 10 steps over 30 years.
pub const PAPER_OUTPUT_TIMES: [f64; 10] = [1.5, 3.0, 4.5, 7.5, 10.5, 13.5, 18.0, 22.5, 27.0, 30.0];
/// Times at which monitoring data are recorded for history matching.
pub const OBSERVATION_TIMES: [f64; 3] = [1.5, 3.0, 4.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WellKind {
    Injector,
    Observer,
}

/// Vertical well completed in all layers at column (i, j).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellSpec {
    pub name: String,
    pub kind: WellKind,
    pub i: usize,
    pub j: usize,
    /// Mass rate in Mt/yr; injectors only.
    #[serde(default)]
    pub rate_mt_per_yr: f64,
}

impl WellSpec {
    pub fn injector(name: &str, i: usize, j: usize, rate_mt_per_yr: f64) -> Self {
        WellSpec {
            name: name.into(),
            kind: WellKind::Injector,
            i,
            j,
            rate_mt_per_yr,
        }
    }

    pub fn observer(name: &str, i: usize, j: usize) -> Self {
        WellSpec {
            name: name.into(),
            kind: WellKind::Observer,
            i,
            j,
            rate_mt_per_yr: 0.0,
        }
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if self.i >= grid.nx || self.j >= grid.ny {
            return Err(Error::invalid(format!(
                "well {} at ({}, {}) lies outside the {}x{} grid",
                self.name, self.i, self.j, grid.nx, grid.ny
            )));
        }
        if matches!(self.kind, WellKind::Injector) && self.rate_mt_per_yr < 0.0 {
            return Err(Error::invalid(format!(
                "injector {} has negative rate",
                self.name
            )));
        }
        Ok(())
    }
}

/// Brooks-Corey capillary pressure with Leverett J-scaling; off by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapillarySpec {
    /// Brooks-Corey exponent (0.67).
    pub lambda: f64,
    /// Entry pressure of the reference rock, MPa.
    pub entry_pressure_mpa: f64,
    pub ref_phi: f64,
    pub ref_k_md: f64,
}

impl Default for CapillarySpec {
    fn default() -> Self {
        CapillarySpec {
            lambda: 0.67,
            entry_pressure_mpa: 0.01,
            ref_phi: 0.1,
            ref_k_md: 10.0,
        }
    }
}

/// Fluid/rock parameters of the storage system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluidSpec {
    /// Corey exponents.
    pub n_w: f64,
    pub n_g: f64,
    /// CO2 relative permeability at irreducible water saturation.
    pub krg_at_swi: f64,
    pub s_wi: f64,
    pub s_gr: f64,
    /// Viscosities in cp.
    pub mu_g_cp: f64,
    pub mu_w_cp: f64,
    /// Densities in kg/m3.
    pub rho_g: f64,
    pub rho_w: f64,
    /// Total compressibility, 1/Pa.
    pub c_t: f64,
    /// Initial pressure at the middle layer, MPa.
    pub p_init_mid_mpa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capillary: Option<CapillarySpec>,
}

impl Default for FluidSpec {
    fn default() -> Self {
        FluidSpec {
            n_w: 6.0,
            n_g: 5.0,
            krg_at_swi: 0.95,
            s_wi: 0.2,
            s_gr: 0.0,
            mu_g_cp: 0.047,
            mu_w_cp: 0.38,
            rho_g: 610.0,
            rho_w: 975.0,
            c_t: 1e-9,
            p_init_mid_mpa: 19.0,
            capillary: None,
        }
    }
}

impl FluidSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.n_w > 0.0 && self.n_g > 0.0) {
            return Err(Error::invalid("Corey exponents must be > 0"));
        }
        if !(0.0..1.0).contains(&self.s_wi) || self.s_gr < 0.0 {
            return Err(Error::invalid("saturation endpoints out of range"));
        }
        if !(self.mu_g_cp > 0.0 && self.mu_w_cp > 0.0 && self.rho_g > 0.0 && self.rho_w > 0.0) {
            return Err(Error::invalid("viscosities and densities must be > 0"));
        }
        if !(self.c_t > 0.0) {
            return Err(Error::invalid("total compressibility must be > 0"));
        }
        Ok(())
    }

    /// Mobile saturation window width.
    #[inline]
    fn mobile_range(&self) -> f64 {
        (1.0 - self.s_wi - self.s_gr).max(1e-12)
    }

    /// Water relative permeability as a function of gas saturation.
    #[inline]
    pub fn krw(&self, sg: f64) -> f64 {
        let sw = 1.0 - sg;
        let swe = ((sw - self.s_wi) / self.mobile_range()).clamp(0.0, 1.0);
        swe.powf(self.n_w)
    }

    #[inline]
    pub fn krg(&self, sg: f64) -> f64 {
        let sge = ((sg - self.s_gr) / self.mobile_range()).clamp(0.0, 1.0);
        self.krg_at_swi * sge.powf(self.n_g)
    }

    /// Phase mobilities in 1/(Pa s).
    #[inline]
    pub fn lambda_w(&self, sg: f64) -> f64 {
        self.krw(sg) / (self.mu_w_cp * CP_TO_PAS)
    }

    #[inline]
    pub fn lambda_g(&self, sg: f64) -> f64 {
        self.krg(sg) / (self.mu_g_cp * CP_TO_PAS)
    }

    #[inline]
    pub fn lambda_total(&self, sg: f64) -> f64 {
        self.lambda_w(sg) + self.lambda_g(sg)
    }

    /// Gas fractional flow.
    #[inline]
    pub fn frac_flow_gas(&self, sg: f64) -> f64 {
        let lg = self.lambda_g(sg);
        if lg == 0.0 {
            return 0.0;
        }
        lg / (lg + self.lambda_w(sg))
    }

    /// Buoyancy mobility across a vertical face: gas drawn from the lower
    /// cell, water displaced from the upper cell.
    #[inline]
    pub fn grav_mobility(&self, sg_lower: f64, sg_upper: f64) -> f64 {
        let lg = self.lambda_g(sg_lower);
        if lg == 0.0 {
            return 0.0;
        }
        let lw = self.lambda_w(sg_upper);
        if lw == 0.0 {
            return 0.0;
        }
        lg * lw / (lg + lw)
    }

    /// Capillary pressure in Pa for the given cell rock, if enabled.
    #[inline]
    pub fn capillary_pressure(&self, sg: f64, phi: f64, k_md: f64) -> f64 {
        let Some(cap) = &self.capillary else {
            return 0.0;
        };
        let sw = 1.0 - sg;
        let swe = ((sw - self.s_wi) / (1.0 - self.s_wi)).clamp(1e-3, 1.0);
        let scale = ((phi / k_md) * (cap.ref_k_md / cap.ref_phi)).sqrt();
        cap.entry_pressure_mpa * MPA_TO_PA * scale * swe.powf(-1.0 / cap.lambda)
    }
}

/// Pressure and saturation on the grid at each scheduled output time.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSeries {
    /// Output times in years, strictly increasing.
    pub times: Vec<f64>,
    /// Pressure per time per cell, MPa.
    pub pressure: Vec<Vec<f64>>,
    /// CO2 saturation per time per cell.
    pub saturation: Vec<Vec<f64>>,
    /// Volume bookkeeping per output time (reservoir conditions, m3).
    pub injected_volume_m3: Vec<f64>,
    pub stored_volume_m3: Vec<f64>,
}

impl FieldSeries {
    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn time_index(&self, t_years: f64) -> Option<usize> {
        self.times.iter().position(|t| (t - t_years).abs() < 1e-9)
    }

    /// Mass-balance error relative to injected mass at output index `ti`.
    pub fn mass_balance_error(&self, ti: usize) -> f64 {
        let inj = self.injected_volume_m3[ti];
        if inj == 0.0 {
            return self.stored_volume_m3[ti].abs();
        }
        (inj - self.stored_volume_m3[ti]).abs() / inj
    }

    const MAGIC: &'static [u8; 16] = b"CO2HM.FLDSERIES1";

    pub fn save(&self, path: &Path) -> Result<()> {
        let n_t = self.times.len();
        let n_s = self.pressure.first().map_or(0, |p| p.len());
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(Self::MAGIC)?;
        w.write_all(&(n_t as u64).to_le_bytes())?;
        w.write_all(&(n_s as u64).to_le_bytes())?;
        for v in &self.times {
            w.write_all(&v.to_le_bytes())?;
        }
        for row in self.pressure.iter().chain(self.saturation.iter()) {
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for v in self.injected_volume_m3.iter().chain(self.stored_volume_m3.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 16];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: "bad magic".into(),
            });
        }
        let n_t = read_u64(&mut r)? as usize;
        let n_s = read_u64(&mut r)? as usize;
        let times = read_f64s(&mut r, n_t)?;
        let mut pressure = Vec::with_capacity(n_t);
        for _ in 0..n_t {
            pressure.push(read_f64s(&mut r, n_s)?);
        }
        let mut saturation = Vec::with_capacity(n_t);
        for _ in 0..n_t {
            saturation.push(read_f64s(&mut r, n_s)?);
        }
        let injected = read_f64s(&mut r, n_t)?;
        let stored = read_f64s(&mut r, n_t)?;
        Ok(FieldSeries {
            times,
            pressure,
            saturation,
            injected_volume_m3: injected,
            stored_volume_m3: stored,
        })
    }

    /// Per-time summary: min/max/mean pressure and gas-filled pore volume.
    pub fn write_summary_csv(
        &self,
        path: &Path,
        grid: &GridSpec,
        phi: &[f64],
        header: Option<&str>,
    ) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        if let Some(h) = header {
            writeln!(w, "{h}")?;
        }
        writeln!(w, "time_years,p_min_mpa,p_max_mpa,p_mean_mpa,plume_volume_m3")?;
        let v_cell = grid.cell_volume();
        for (ti, t) in self.times.iter().enumerate() {
            let p = &self.pressure[ti];
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for &v in p {
                lo = lo.min(v);
                hi = hi.max(v);
                sum += v;
            }
            let plume: f64 = self.saturation[ti]
                .iter()
                .zip(phi.iter())
                .map(|(s, f)| s * f * v_cell)
                .sum();
            writeln!(
                w,
                "{t},{lo},{hi},{},{plume}",
                sum / p.len() as f64
            )?;
        }
        w.flush()?;
        Ok(())
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Pressure,
    Saturation,
}

impl std::fmt::Display for Quantity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Quantity::Pressure => write!(f, "pressure"),
            Quantity::Saturation => write!(f, "saturation"),
        }
    }
}

/// One observation slot: a cell column position, layer, time and quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaEntry {
    pub well: String,
    pub i: usize,
    pub j: usize,
    /// Layer index, 0 = top.
    pub layer: usize,
    pub time_years: f64,
    pub quantity: Quantity,
}

/// Fixed-order observation layout shared by truth data, observed data and
/// forward predictions.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ObservationSchema {
    pub entries: Vec<SchemaEntry>,
}

impl ObservationSchema {
    /// Monitoring layout: saturation in every layer of each observer at the
    /// given times, then pressure in the listed layers. At full scale this
    /// yields 240 saturation and 12 pressure entries.
    pub fn monitoring(
        observers: &[&WellSpec],
        nz: usize,
        times: &[f64],
        pressure_layers: &[usize],
    ) -> Self {
        let mut entries = Vec::new();
        for w in observers {
            for layer in 0..nz {
                for &t in times {
                    entries.push(SchemaEntry {
                        well: w.name.clone(),
                        i: w.i,
                        j: w.j,
                        layer,
                        time_years: t,
                        quantity: Quantity::Saturation,
                    });
                }
            }
        }
        for w in observers {
            for &layer in pressure_layers {
                for &t in times {
                    entries.push(SchemaEntry {
                        well: w.name.clone(),
                        i: w.i,
                        j: w.j,
                        layer,
                        time_years: t,
                        quantity: Quantity::Pressure,
                    });
                }
            }
        }
        ObservationSchema { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Schema-ordered observation values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationVector {
    pub values: Vec<f64>,
}

/// Copy values out of a field series in schema order; requested times must
/// be present exactly (no interpolation).
pub fn extract_observations(
    fs: &FieldSeries,
    grid: &GridSpec,
    schema: &ObservationSchema,
) -> Result<ObservationVector> {
    let mut values = Vec::with_capacity(schema.entries.len());
    for e in &schema.entries {
        let ti = fs.time_index(e.time_years).ok_or_else(|| {
            Error::SchemaMismatch(format!(
                "time {} yr not among the simulated output times",
                e.time_years
            ))
        })?;
        if e.i >= grid.nx || e.j >= grid.ny || e.layer >= grid.nz {
            return Err(Error::SchemaMismatch(format!(
                "entry for well {} addresses cell outside the grid",
                e.well
            )));
        }
        let cell = grid.idx(e.i, e.j, e.layer);
        let v = match e.quantity {
            Quantity::Pressure => fs.pressure[ti][cell],
            Quantity::Saturation => fs.saturation[ti][cell],
        };
        values.push(v);
    }
    Ok(ObservationVector { values })
}

/// Per-time pressure extrema over a reference ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressureStats {
    pub times: Vec<f64>,
    pub p_min: Vec<f64>,
    pub p_max: Vec<f64>,
}

pub fn compute_pressure_stats(ensemble: &[&FieldSeries]) -> Result<PressureStats> {
    let first = ensemble
        .first()
        .ok_or_else(|| Error::invalid("empty reference ensemble"))?;
    let times = first.times.clone();
    let mut p_min = vec![f64::INFINITY; times.len()];
    let mut p_max = vec![f64::NEG_INFINITY; times.len()];
    for fs in ensemble {
        if fs.times != times {
            return Err(Error::invalid("ensemble members have differing schedules"));
        }
        for (ti, row) in fs.pressure.iter().enumerate() {
            for &v in row {
                p_min[ti] = p_min[ti].min(v);
                p_max[ti] = p_max[ti].max(v);
            }
        }
    }
    Ok(PressureStats { times, p_min, p_max })
}

/// Min-max normalization of the pressure deviation from the initial field:
/// `(p - p0) / (p_max - p_min)` per cell and time. Saturation passes through.
pub fn normalize_pressure(
    fs: &FieldSeries,
    stats: &PressureStats,
    p0: &[f64],
) -> Result<FieldSeries> {
    if stats.times != fs.times {
        return Err(Error::invalid("stats schedule differs from the series"));
    }
    let mut out = fs.clone();
    for (ti, row) in out.pressure.iter_mut().enumerate() {
        let range = stats.p_max[ti] - stats.p_min[ti];
        if !(range > 0.0) {
            return Err(Error::Numerical(format!(
                "degenerate pressure range at t = {} yr",
                fs.times[ti]
            )));
        }
        if row.len() != p0.len() {
            return Err(Error::DimensionMismatch {
                expected: p0.len(),
                got: row.len(),
                context: "initial pressure field".into(),
            });
        }
        for (v, p_init) in row.iter_mut().zip(p0.iter()) {
            *v = (*v - p_init) / range;
        }
    }
    Ok(out)
}

/// Inverse of [`normalize_pressure`].
pub fn denormalize_pressure(
    fs: &FieldSeries,
    stats: &PressureStats,
    p0: &[f64],
) -> Result<FieldSeries> {
    if stats.times != fs.times {
        return Err(Error::invalid("stats schedule differs from the series"));
    }
    let mut out = fs.clone();
    for (ti, row) in out.pressure.iter_mut().enumerate() {
        let range = stats.p_max[ti] - stats.p_min[ti];
        for (v, p_init) in row.iter_mut().zip(p0.iter()) {
            *v = *v * range + p_init;
        }
    }
    Ok(out)
}

/// Initial hydrostatic pressure per cell in MPa, anchored at the middle of
/// the model thickness.
pub fn hydrostatic_pressure(grid: &GridSpec, fluid: &FluidSpec) -> Vec<f64> {
    let z_mid = grid.nz as f64 * grid.dz / 2.0;
    let mut p0 = vec![0.0; grid.n_cells()];
    for iz in 0..grid.nz {
        let z = (iz as f64 + 0.5) * grid.dz;
        let p = fluid.p_init_mid_mpa + fluid.rho_w * GRAVITY * (z - z_mid) / MPA_TO_PA;
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                p0[grid.idx(ix, iy, iz)] = p;
            }
        }
    }
    p0
}
