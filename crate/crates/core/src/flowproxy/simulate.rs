//! IMPES time stepping: implicit finite-volume pressure, explicit first-order
//! upwind CO2 transport with Corey fractional flow and gravity segregation.
//!
//! The pressure unknown is the deviation from the initial hydrostatic field,
//! so a quiescent model stays exactly at equilibrium. Buoyancy enters the
//! saturation equation as a segregation flux on vertical faces. Transport
//! substeps are CFL-limited from local secant slopes of the flux functions;
//! a per-cell outflow/inflow limiter keeps saturations in [0, 1] and the
//! scheme conservative even when the substep budget throttles the CFL step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geomodel::Geomodel;
use crate::grid::GridSpec;

#[doc(hidden)]
pub static SUBSTEP_COUNT: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);
#[doc(hidden)]
pub static PSTEP_COUNT: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);
#[doc(hidden)]
pub static CG_ITER_COUNT: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);

use super::linsolve::{solve, Preconditioner, StencilMatrix};
use super::{
    hydrostatic_pressure, FieldSeries, FluidSpec, WellKind, WellSpec, GRAVITY, MD_TO_M2,
    MPA_TO_PA, YEAR_SECONDS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Cap on the implicit pressure step, years.
    pub max_pressure_dt_years: f64,
    /// First pressure step after start, years; grows geometrically.
    pub initial_dt_years: f64,
    pub dt_growth: f64,
    /// Safety factor on the transport CFL estimate.
    pub cfl: f64,
    /// Additional cap on per-cell saturation change per substep.
    pub max_ds_per_substep: f64,
    /// Substep budget per pressure step; beyond it fluxes are throttled by
    /// the limiter instead of shrinking the step further.
    pub max_substeps_per_step: usize,
    /// Pore-volume multiplier on the outermost ring of cells, emulating the
    /// storage capacity of the surrounding region. 1.0 = plain closed box.
    pub boundary_pv_multiplier: f64,
    /// Scales all step controls together; 0.5 halves the time step.
    pub time_step_scale: f64,
    pub preconditioner: Preconditioner,
    pub linsolve_tol: f64,
    pub linsolve_max_iters: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            max_pressure_dt_years: 0.1,
            initial_dt_years: 0.01,
            dt_growth: 1.35,
            cfl: 0.3,
            max_ds_per_substep: 0.05,
            max_substeps_per_step: 1500,
            boundary_pv_multiplier: 1.0,
            time_step_scale: 1.0,
            preconditioner: Preconditioner::Ic0,
            linsolve_tol: 1e-10,
            linsolve_max_iters: 4000,
        }
    }
}

/// Saturation-function lookup tables; the transport inner loops are far too
/// hot for `powf`. Resolution 1/1024 keeps interpolation error orders below
/// the physics tolerances.
struct FluidTables {
    inv_ds: f64,
    last: usize,
    fg: Vec<f64>,
    lam_t: Vec<f64>,
    lam_g: Vec<f64>,
    lam_w: Vec<f64>,
    /// Pointwise derivative magnitudes, for local wave-speed bounds.
    dfg: Vec<f64>,
    dlam_g: Vec<f64>,
    dlam_w: Vec<f64>,
}

impl FluidTables {
    const N: usize = 1024;

    fn build(fluid: &FluidSpec) -> Self {
        let n = Self::N;
        let ds = 1.0 / n as f64;
        let mut fg = Vec::with_capacity(n + 1);
        let mut lam_t = Vec::with_capacity(n + 1);
        let mut lam_g = Vec::with_capacity(n + 1);
        let mut lam_w = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let s = i as f64 * ds;
            fg.push(fluid.frac_flow_gas(s));
            lam_t.push(fluid.lambda_total(s));
            lam_g.push(fluid.lambda_g(s));
            lam_w.push(fluid.lambda_w(s));
        }
        let diff = |t: &[f64]| -> Vec<f64> {
            (0..=n)
                .map(|i| {
                    let lo = i.saturating_sub(1);
                    let hi = (i + 1).min(n);
                    ((t[hi] - t[lo]) / ((hi - lo) as f64 * ds)).abs()
                })
                .collect()
        };
        FluidTables {
            inv_ds: n as f64,
            last: n,
            dfg: diff(&fg),
            dlam_g: diff(&lam_g),
            dlam_w: diff(&lam_w),
            fg,
            lam_t,
            lam_g,
            lam_w,
        }
    }

    #[inline]
    fn lookup(&self, table: &[f64], s: f64) -> f64 {
        let x = (s * self.inv_ds).clamp(0.0, self.last as f64);
        let i = (x as usize).min(self.last - 1);
        let frac = x - i as f64;
        table[i] + frac * (table[i + 1] - table[i])
    }

    /// Max of a derivative table over s +/- a window, guarding the CFL bound
    /// against movement within one substep.
    #[inline]
    fn window_max(&self, table: &[f64], s: f64, window: f64) -> f64 {
        let a = self.lookup(table, s - window);
        let b = self.lookup(table, s);
        let c = self.lookup(table, s + window);
        a.max(b).max(c)
    }

    #[inline]
    fn frac_flow_gas(&self, s: f64) -> f64 {
        self.lookup(&self.fg, s)
    }

    #[inline]
    fn lambda_total(&self, s: f64) -> f64 {
        self.lookup(&self.lam_t, s)
    }

    /// Buoyancy mobility with table-backed phase mobilities.
    #[inline]
    fn grav_mobility(&self, sg_lower: f64, sg_upper: f64) -> f64 {
        let lg = self.lookup(&self.lam_g, sg_lower);
        if lg <= 0.0 {
            return 0.0;
        }
        let lw = self.lookup(&self.lam_w, sg_upper);
        if lw <= 0.0 {
            return 0.0;
        }
        lg * lw / (lg + lw)
    }

    /// Bound on |d grav_mobility / d s| in each argument near the current
    /// face state: |d/dsL| <= (lw/(lg+lw))^2 lg'(sL), |d/dsU| <= (lg/(lg+lw))^2 |lw'(sU)|.
    #[inline]
    fn grav_speed_bound(&self, sg_lower: f64, sg_upper: f64, window: f64) -> f64 {
        let lg = self.window_max(&self.lam_g, sg_lower, window);
        let lw = self.lookup(&self.lam_w, (sg_upper - window).max(0.0));
        let denom = lg + lw;
        if denom <= 0.0 {
            return 0.0;
        }
        let wl = lw / denom;
        let wg = lg / denom;
        wl * wl * self.window_max(&self.dlam_g, sg_lower, window)
            + wg * wg * self.window_max(&self.dlam_w, sg_upper, window)
    }
}

struct WellSource {
    /// Volumetric injection per completed cell, m3/s at reservoir density.
    q_vol: Vec<f64>,
    total_rate_m3s: f64,
}

fn build_sources(
    grid: &GridSpec,
    model: &Geomodel,
    wells: &[WellSpec],
    fluid: &FluidSpec,
) -> Result<WellSource> {
    let mut q_vol = vec![0.0; grid.n_cells()];
    let mut total = 0.0;
    let mut injectors = 0;
    for w in wells {
        w.validate(grid)?;
        if !matches!(w.kind, WellKind::Injector) {
            continue;
        }
        injectors += 1;
        let mass_rate = w.rate_mt_per_yr * 1e9 / YEAR_SECONDS; // kg/s
        let q_well = mass_rate / fluid.rho_g; // m3/s
        total += q_well;
        // Rate allocated per layer proportional to the well-block
        // permeability, fixed at t = 0.
        let mut ksum = 0.0;
        for iz in 0..grid.nz {
            ksum += model.k[grid.idx(w.i, w.j, iz)];
        }
        for iz in 0..grid.nz {
            let cell = grid.idx(w.i, w.j, iz);
            let weight = if ksum > 0.0 {
                model.k[cell] / ksum
            } else {
                1.0 / grid.nz as f64
            };
            q_vol[cell] += q_well * weight;
        }
    }
    if injectors == 0 {
        return Err(Error::invalid("at least one injector well is required"));
    }
    Ok(WellSource {
        q_vol,
        total_rate_m3s: total,
    })
}

struct Mesh {
    n: usize,
    strides: [usize; 3],
    /// Geometric transmissibility x harmonic permeability, m3; index i holds
    /// the face between i and i + stride (0 where absent).
    trans: [Vec<f64>; 3],
    /// Buoyancy coefficient per z-face: harm(k_v) * A * drho * g, m3*Pa/(Pa*s)
    /// once multiplied by a mobility.
    grav_coef: Vec<f64>,
    /// True pore volume, m3.
    pv: Vec<f64>,
    /// Pressure-equation pore volume (boundary multiplier applied), m3.
    pv_eff: Vec<f64>,
}

fn build_mesh(grid: &GridSpec, model: &Geomodel, fluid: &FluidSpec, opts: &SimOptions) -> Mesh {
    let n = grid.n_cells();
    let strides = [1, grid.nx, grid.nx * grid.ny];
    let mut trans = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut grav_coef = vec![0.0; n];

    let harm = |ka: f64, kb: f64| {
        if ka + kb > 0.0 {
            2.0 * ka * kb / (ka + kb)
        } else {
            0.0
        }
    };
    let drho_g = (fluid.rho_w - fluid.rho_g) * GRAVITY;

    for iz in 0..grid.nz {
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let c = grid.idx(ix, iy, iz);
                let k_c = model.k[c] * MD_TO_M2;
                if ix + 1 < grid.nx {
                    let o = grid.idx(ix + 1, iy, iz);
                    trans[0][c] = harm(k_c, model.k[o] * MD_TO_M2) * grid.dy * grid.dz / grid.dx;
                }
                if iy + 1 < grid.ny {
                    let o = grid.idx(ix, iy + 1, iz);
                    trans[1][c] = harm(k_c, model.k[o] * MD_TO_M2) * grid.dx * grid.dz / grid.dy;
                }
                if iz + 1 < grid.nz {
                    let o = grid.idx(ix, iy, iz + 1);
                    let kv = harm(k_c * model.a_r, model.k[o] * MD_TO_M2 * model.a_r);
                    trans[2][c] = kv * grid.dx * grid.dy / grid.dz;
                    grav_coef[c] = kv * grid.dx * grid.dy * drho_g;
                }
            }
        }
    }

    let v_cell = grid.cell_volume();
    let mut pv = Vec::with_capacity(n);
    let mut pv_eff = Vec::with_capacity(n);
    for c in 0..n {
        let (ix, iy, _) = grid.coords(c);
        let base = model.phi[c] * v_cell;
        pv.push(base);
        let on_rim = ix == 0 || iy == 0 || ix == grid.nx - 1 || iy == grid.ny - 1;
        pv_eff.push(if on_rim {
            base * opts.boundary_pv_multiplier
        } else {
            base
        });
    }

    Mesh {
        n,
        strides,
        trans,
        grav_coef,
        pv,
        pv_eff,
    }
}

/// Run the proxy over the requested output schedule.
pub fn simulate(
    model: &Geomodel,
    grid: &GridSpec,
    wells: &[WellSpec],
    fluid: &FluidSpec,
    output_times_years: &[f64],
    opts: &SimOptions,
) -> Result<FieldSeries> {
    grid.validate()?;
    fluid.validate()?;
    let n = grid.n_cells();
    if model.k.len() != n || model.phi.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: model.k.len(),
            context: "geomodel vs grid".into(),
        });
    }
    if output_times_years.is_empty() {
        return Err(Error::invalid("output schedule is empty"));
    }
    if output_times_years
        .windows(2)
        .any(|w| w[1] <= w[0])
        || output_times_years[0] <= 0.0
    {
        return Err(Error::invalid("output times must be positive and strictly increasing"));
    }
    if !(opts.time_step_scale > 0.0) {
        return Err(Error::invalid("time_step_scale must be > 0"));
    }

    let mesh = build_mesh(grid, model, fluid, opts);
    let source = build_sources(grid, model, wells, fluid)?;
    let tables = FluidTables::build(fluid);
    let p0 = hydrostatic_pressure(grid, fluid);

    let scale = opts.time_step_scale;
    let dt_max = opts.max_pressure_dt_years * scale;
    let mut dt_next = opts.initial_dt_years * scale;

    let mut state = State::new(n);
    let mut out = FieldSeries {
        times: Vec::with_capacity(output_times_years.len()),
        pressure: Vec::with_capacity(output_times_years.len()),
        saturation: Vec::with_capacity(output_times_years.len()),
        injected_volume_m3: Vec::with_capacity(output_times_years.len()),
        stored_volume_m3: Vec::with_capacity(output_times_years.len()),
    };

    let mut t = 0.0_f64;
    for &t_out in output_times_years {
        while t < t_out - 1e-12 {
            let dt = dt_next.min(t_out - t);
            pressure_step(&mesh, fluid, &tables, &source, opts, dt * YEAR_SECONDS, &mut state)?;
            transport_step(&mesh, model, fluid, &tables, &source, opts, dt * YEAR_SECONDS, &mut state)?;
            t += dt;
            dt_next = (dt_next * opts.dt_growth).min(dt_max);
        }

        let mut pressure = Vec::with_capacity(n);
        for c in 0..n {
            pressure.push(p0[c] + state.p[c] / MPA_TO_PA);
        }
        let saturation: Vec<f64> = state.s.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let stored: f64 = state.s.iter().zip(mesh.pv.iter()).map(|(s, pv)| s * pv).sum();
        out.times.push(t_out);
        out.pressure.push(pressure);
        out.saturation.push(saturation);
        out.injected_volume_m3
            .push(source.total_rate_m3s * t * YEAR_SECONDS);
        out.stored_volume_m3.push(stored);
    }
    Ok(out)
}

struct State {
    /// Pressure deviation from hydrostatic, Pa.
    p: Vec<f64>,
    /// Previous-step pressure and step length, for warm-start extrapolation.
    p_prev: Vec<f64>,
    dt_prev_s: f64,
    step_count: usize,
    /// CO2 saturation.
    s: Vec<f64>,
    /// Total volumetric face fluxes from the last pressure solve, m3/s,
    /// positive from i to i + stride.
    u: [Vec<f64>; 3],
    // Scratch buffers reused across steps.
    rhs: Vec<f64>,
    lam_face: [Vec<f64>; 3],
    flux_visc: [Vec<f64>; 3],
    flux_grav: Vec<f64>,
    outflow: Vec<f64>,
    inflow: Vec<f64>,
    scale_d: Vec<f64>,
    scale_r: Vec<f64>,
    pc: Vec<f64>,
    active: Vec<bool>,
}

impl State {
    fn new(n: usize) -> Self {
        State {
            p: vec![0.0; n],
            p_prev: vec![0.0; n],
            dt_prev_s: 0.0,
            step_count: 0,
            s: vec![0.0; n],
            u: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            rhs: vec![0.0; n],
            lam_face: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            flux_visc: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            flux_grav: vec![0.0; n],
            outflow: vec![0.0; n],
            inflow: vec![0.0; n],
            scale_d: vec![1.0; n],
            scale_r: vec![1.0; n],
            pc: vec![0.0; n],
            active: vec![false; n],
        }
    }
}

/// Implicit solve of the slightly-compressible pressure equation with face
/// total mobilities lagged at the current saturations (upwinded by the
/// previous pressure gradient), then total face fluxes.
fn pressure_step(
    mesh: &Mesh,
    fluid: &FluidSpec,
    tables: &FluidTables,
    source: &WellSource,
    opts: &SimOptions,
    dt_s: f64,
    state: &mut State,
) -> Result<()> {
    let n = mesh.n;
    let mut a = StencilMatrix::zeros(n, mesh.strides);

    for ax in 0..3 {
        let stride = mesh.strides[ax];
        let trans = &mesh.trans[ax];
        let lam = &mut state.lam_face[ax];
        for i in 0..n.saturating_sub(stride) {
            if trans[i] == 0.0 {
                lam[i] = 0.0;
                continue;
            }
            let j = i + stride;
            let dp = state.p[i] - state.p[j];
            let l = if dp > 0.0 {
                tables.lambda_total(state.s[i])
            } else if dp < 0.0 {
                tables.lambda_total(state.s[j])
            } else {
                0.5 * (tables.lambda_total(state.s[i]) + tables.lambda_total(state.s[j]))
            };
            lam[i] = l;
            let c = trans[i] * l;
            a.off[ax][i] = -c;
            a.diag[i] += c;
            a.diag[j] += c;
        }
    }

    for i in 0..n {
        let acc = mesh.pv_eff[i] * fluid.c_t / dt_s;
        a.diag[i] += acc;
        state.rhs[i] = acc * state.p[i] + source.q_vol[i];
    }

    // Warm start by linear extrapolation from the previous step.
    if state.dt_prev_s > 0.0 {
        let r = dt_s / state.dt_prev_s;
        for i in 0..n {
            let p_cur = state.p[i];
            let guess = p_cur + (p_cur - state.p_prev[i]) * r;
            state.p_prev[i] = p_cur;
            state.p[i] = guess;
        }
    } else {
        state.p_prev.copy_from_slice(&state.p);
    }
    state.dt_prev_s = dt_s;

    let iters = solve(
        &a,
        &state.rhs,
        &mut state.p,
        opts.preconditioner,
        opts.linsolve_tol,
        opts.linsolve_max_iters,
    )?;
    PSTEP_COUNT.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    CG_ITER_COUNT.fetch_add(iters, std::sync::atomic::Ordering::Relaxed);

    state.step_count += 1;
    for ax in 0..3 {
        let stride = mesh.strides[ax];
        let trans = &mesh.trans[ax];
        for i in 0..n.saturating_sub(stride) {
            state.u[ax][i] = if trans[i] == 0.0 {
                0.0
            } else {
                trans[i] * state.lam_face[ax][i] * (state.p[i] - state.p[i + stride])
            };
        }
    }
    Ok(())
}

/// March the explicit saturation update over one pressure step.
fn transport_step(
    mesh: &Mesh,
    model: &Geomodel,
    fluid: &FluidSpec,
    tables: &FluidTables,
    source: &WellSource,
    opts: &SimOptions,
    dt_s: f64,
    state: &mut State,
) -> Result<()> {
    let n = mesh.n;
    let scale = opts.time_step_scale;
    let cfl = opts.cfl * scale;
    let ds_cap = opts.max_ds_per_substep * scale;
    let dt_floor = dt_s / opts.max_substeps_per_step as f64;
    let window = opts.max_ds_per_substep;
    let cap_on = fluid.capillary.is_some();

    let mut tau = 0.0_f64;
    while tau < dt_s - 1e-9 {
        if cap_on {
            for i in 0..n {
                state.pc[i] = fluid.capillary_pressure(state.s[i], model.phi[i], model.k[i]);
            }
        }

        // Gas can only move across faces touching a cell that already holds
        // gas (or receives injection): fractional flow and buoyancy both
        // vanish at S = 0. Restrict the face sweep accordingly.
        for i in 0..n {
            state.active[i] = state.s[i] > 0.0 || source.q_vol[i] > 0.0;
        }

        // One fused sweep: face fluxes, CFL wave-speed bound, and per-cell
        // outflow/inflow totals.
        state.outflow.iter_mut().for_each(|v| *v = 0.0);
        state.inflow.iter_mut().for_each(|v| *v = 0.0);
        let mut dt_cfl = f64::INFINITY;
        for ax in 0..3 {
            let stride = mesh.strides[ax];
            let trans = &mesh.trans[ax];
            let u_ax = &state.u[ax];
            let flux = &mut state.flux_visc[ax];
            for i in 0..n.saturating_sub(stride) {
                let j = i + stride;
                if trans[i] == 0.0 || !(state.active[i] || state.active[j]) {
                    flux[i] = 0.0;
                    if ax == 2 {
                        state.flux_grav[i] = 0.0;
                    }
                    continue;
                }
                let s_i = state.s[i];
                let s_j = state.s[j];
                let u = u_ax[i];
                let s_up = if u >= 0.0 { s_i } else { s_j };
                let mut fv = tables.frac_flow_gas(s_up) * u;
                let mut speed = u.abs() * tables.window_max(&tables.dfg, s_up, window);

                if cap_on {
                    let dpc = state.pc[i] - state.pc[j];
                    if dpc != 0.0 {
                        let (sf, st) = if dpc > 0.0 { (s_i, s_j) } else { (s_j, s_i) };
                        let lam = tables.grav_mobility(sf, st);
                        fv += trans[i] * lam * dpc;
                        speed += trans[i] * lam.max(1e-30) * dpc.abs() / window;
                    }
                }
                flux[i] = fv;
                if fv > 0.0 {
                    state.outflow[i] += fv;
                    state.inflow[j] += fv;
                } else if fv < 0.0 {
                    state.outflow[j] -= fv;
                    state.inflow[i] -= fv;
                }

                if ax == 2 {
                    // Buoyancy drives gas from the lower cell j to the upper
                    // cell i: negative in the i -> j convention.
                    let gm = tables.grav_mobility(s_j, s_i);
                    let fg = -mesh.grav_coef[i] * gm;
                    state.flux_grav[i] = fg;
                    if fg < 0.0 {
                        state.outflow[j] -= fg;
                        state.inflow[i] -= fg;
                    }
                    speed += mesh.grav_coef[i] * tables.grav_speed_bound(s_j, s_i, window);
                }

                if speed > 0.0 {
                    let pv_min = mesh.pv[i].min(mesh.pv[j]);
                    dt_cfl = dt_cfl.min(cfl * pv_min / speed);
                }
            }
        }

        // Source fill-rate and saturation-change bounds.
        let mut dt_ds = f64::INFINITY;
        for i in 0..n {
            if source.q_vol[i] > 0.0 {
                dt_cfl = dt_cfl.min(0.5 * mesh.pv[i] / source.q_vol[i]);
            }
            let net = (state.inflow[i] + source.q_vol[i] - state.outflow[i]).abs();
            if net > 0.0 {
                dt_ds = dt_ds.min(ds_cap * mesh.pv[i] / net);
            }
        }

        let mut dt_sub = dt_cfl.min(dt_ds).min(dt_s - tau);
        if !(dt_sub > 0.0) || dt_sub.is_nan() {
            return Err(Error::TimeStepUnderflow {
                dt: dt_sub / YEAR_SECONDS,
                floor: dt_floor / YEAR_SECONDS,
            });
        }
        // Throttle rather than exceed the substep budget; the limiters below
        // keep the update bounded and conservative.
        if dt_sub < dt_floor {
            dt_sub = dt_floor.min(dt_s - tau);
        }

        apply_limited_update(mesh, source, state, dt_sub);
        tau += dt_sub;
        SUBSTEP_COUNT.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    }
    Ok(())
}

/// Apply one substep with donor-content and receiver-capacity limiters. Both
/// limiters scale face fluxes, so the update stays conservative.
fn apply_limited_update(mesh: &Mesh, source: &WellSource, state: &mut State, dt: f64) {
    let n = mesh.n;
    for i in 0..n {
        let out = state.outflow[i];
        state.scale_d[i] = if out > 0.0 {
            (state.s[i].max(0.0) * mesh.pv[i] / (out * dt)).min(1.0)
        } else {
            1.0
        };
    }

    // Receiver capacity against donor-scaled inflows.
    state.inflow.iter_mut().for_each(|v| *v = 0.0);
    for ax in 0..3 {
        let stride = mesh.strides[ax];
        for i in 0..n.saturating_sub(stride) {
            let j = i + stride;
            let fv = state.flux_visc[ax][i];
            if fv > 0.0 {
                state.inflow[j] += fv * state.scale_d[i];
            } else if fv < 0.0 {
                state.inflow[i] += (-fv) * state.scale_d[j];
            }
            if ax == 2 {
                let fg = state.flux_grav[i];
                if fg < 0.0 {
                    state.inflow[i] += (-fg) * state.scale_d[j];
                }
            }
        }
    }
    for i in 0..n {
        let inflow = state.inflow[i];
        if inflow <= 0.0 {
            state.scale_r[i] = 1.0;
            continue;
        }
        let headroom = (1.0 - state.s[i]) * mesh.pv[i] / dt
            + state.outflow[i] * state.scale_d[i]
            - source.q_vol[i];
        state.scale_r[i] = (headroom / inflow).clamp(0.0, 1.0);
    }

    for ax in 0..3 {
        let stride = mesh.strides[ax];
        for i in 0..n.saturating_sub(stride) {
            let j = i + stride;
            let fv = state.flux_visc[ax][i];
            if fv > 0.0 {
                let f = fv * state.scale_d[i] * state.scale_r[j] * dt;
                state.s[i] -= f / mesh.pv[i];
                state.s[j] += f / mesh.pv[j];
            } else if fv < 0.0 {
                let f = (-fv) * state.scale_d[j] * state.scale_r[i] * dt;
                state.s[j] -= f / mesh.pv[j];
                state.s[i] += f / mesh.pv[i];
            }
            if ax == 2 {
                let fg = state.flux_grav[i];
                if fg < 0.0 {
                    let f = (-fg) * state.scale_d[j] * state.scale_r[i] * dt;
                    state.s[j] -= f / mesh.pv[j];
                    state.s[i] += f / mesh.pv[i];
                }
            }
        }
    }
    for i in 0..n {
        if source.q_vol[i] > 0.0 {
            state.s[i] += source.q_vol[i] * dt / mesh.pv[i];
        }
        // Rounding guard; magnitudes here are far below the mass-balance
        // tolerance.
        if state.s[i] < 0.0 && state.s[i] > -1e-12 {
            state.s[i] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowproxy::{
        extract_observations, ObservationSchema, WellSpec, OBSERVATION_TIMES,
    };
    use crate::geomodel::{assemble_geomodel, GaussianFieldSampler, Metaparameters, VariogramSpec};

    fn homogeneous(grid: &GridSpec, k_md: f64, phi: f64, a_r: f64) -> Geomodel {
        Geomodel {
            k: vec![k_md; grid.n_cells()],
            phi: vec![phi; grid.n_cells()],
            a_r,
        }
    }

    fn heterogeneous(grid: &GridSpec) -> Geomodel {
        let vario = VariogramSpec::new(1500.0, 10.0).unwrap();
        let sampler = GaussianFieldSampler::new(*grid, vario).unwrap();
        let y = sampler.sample(123);
        let theta = Metaparameters {
            mu_logk: 3.0,
            sigma_logk: 1.4,
            a_r: 0.4,
            d: 0.025,
            e: 0.08,
            l_h: Some(1500.0),
        };
        assemble_geomodel(&y, &theta).unwrap()
    }

    #[test]
    fn zero_injection_stays_quiescent() {
        let grid = GridSpec::new(10, 10, 3, 150.0, 150.0, 5.0).unwrap();
        let model = homogeneous(&grid, 50.0, 0.15, 0.5);
        let fluid = FluidSpec::default();
        let wells = vec![WellSpec::injector("I1", 5, 5, 0.0)];
        let fs = simulate(&model, &grid, &wells, &fluid, &[1.0, 5.0], &SimOptions::default())
            .unwrap();

        let p0 = hydrostatic_pressure(&grid, &fluid);
        for ti in 0..fs.n_times() {
            assert!(fs.saturation[ti].iter().all(|&s| s == 0.0));
            for (a, b) in fs.pressure[ti].iter().zip(p0.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn plume_symmetric_under_quarter_rotation() {
        // Odd grid so the well column is a fixed point of the rotation.
        let grid = GridSpec::new(21, 21, 5, 150.0, 150.0, 5.0).unwrap();
        let model = homogeneous(&grid, 10.0, 0.1, 0.5);
        let fluid = FluidSpec::default();
        let wells = vec![WellSpec::injector("I1", 10, 10, 0.05)];
        let opts = SimOptions {
            preconditioner: Preconditioner::Jacobi,
            linsolve_tol: 1e-13,
            linsolve_max_iters: 20_000,
            ..SimOptions::default()
        };
        let fs = simulate(&model, &grid, &wells, &fluid, &[1.0, 3.0], &opts).unwrap();

        let rot = |ix: usize, iy: usize| (iy, 20 - ix);
        for ti in 0..fs.n_times() {
            let mut worst = 0.0_f64;
            for iz in 0..grid.nz {
                for iy in 0..21 {
                    for ix in 0..21 {
                        let (rx, ry) = rot(ix, iy);
                        let a = fs.saturation[ti][grid.idx(ix, iy, iz)];
                        let b = fs.saturation[ti][grid.idx(rx, ry, iz)];
                        worst = worst.max((a - b).abs());
                    }
                }
            }
            assert!(worst < 1e-10, "t index {ti}: asymmetry {worst:e}");
        }
    }

    #[test]
    fn pseudo_steady_state_material_balance() {
        let grid = GridSpec::new(10, 10, 3, 150.0, 150.0, 5.0).unwrap();
        let phi = 0.12;
        let model = homogeneous(&grid, 50.0, phi, 0.3);
        let fluid = FluidSpec::default();
        let rate = 0.01; // Mt/yr
        let wells = vec![WellSpec::injector("I1", 4, 5, rate)];
        let fs = simulate(
            &model,
            &grid,
            &wells,
            &fluid,
            &[4.0, 5.0],
            &SimOptions::default(),
        )
        .unwrap();

        let q = rate * 1e9 / YEAR_SECONDS / fluid.rho_g; // m3/s
        let v_pore = phi * grid.cell_volume() * grid.n_cells() as f64;
        let want_dpdt = q / (fluid.c_t * v_pore); // Pa/s
        let dt_s = (fs.times[1] - fs.times[0]) * YEAR_SECONDS;
        for c in 0..grid.n_cells() {
            let dpdt = (fs.pressure[1][c] - fs.pressure[0][c]) * MPA_TO_PA / dt_s;
            let rel = (dpdt - want_dpdt).abs() / want_dpdt;
            assert!(rel < 0.02, "cell {c}: dp/dt {dpdt:.4e} vs {want_dpdt:.4e}");
        }
    }

    #[test]
    fn mass_balance_on_heterogeneous_model() {
        let grid = GridSpec::desk_scale();
        let model = heterogeneous(&grid);
        let fluid = FluidSpec::default();
        let wells = vec![
            WellSpec::injector("I1", 5, 5, 0.05),
            WellSpec::injector("I2", 14, 14, 0.05),
        ];
        let fs = simulate(
            &model,
            &grid,
            &wells,
            &fluid,
            &[1.5, 3.0, 4.5],
            &SimOptions::default(),
        )
        .unwrap();
        for ti in 0..fs.n_times() {
            let err = fs.mass_balance_error(ti);
            assert!(err < 1e-6, "t index {ti}: mass error {err:e}");
        }
    }

    #[test]
    fn mean_pressure_nondecreasing() {
        let grid = GridSpec::new(12, 12, 4, 150.0, 150.0, 5.0).unwrap();
        let model = heterogeneous(&GridSpec::new(12, 12, 4, 150.0, 150.0, 5.0).unwrap());
        let fluid = FluidSpec::default();
        let wells = vec![WellSpec::injector("I1", 6, 6, 0.02)];
        let fs = simulate(
            &model,
            &grid,
            &wells,
            &fluid,
            &[0.5, 1.0, 2.0, 3.0, 4.0],
            &SimOptions::default(),
        )
        .unwrap();
        let means: Vec<f64> = fs
            .pressure
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect();
        for w in means.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "mean pressure decreased: {w:?}");
        }
    }

    #[test]
    fn lower_anisotropy_shrinks_top_layer_plume() {
        let grid = GridSpec::new(15, 15, 5, 150.0, 150.0, 5.0).unwrap();
        let fluid = FluidSpec::default();
        let wells = vec![WellSpec::injector("I1", 7, 7, 0.05)];
        let area = |a_r: f64| {
            let model = homogeneous(&grid, 50.0, 0.12, a_r);
            let fs = simulate(&model, &grid, &wells, &fluid, &[4.0], &SimOptions::default())
                .unwrap();
            fs.saturation[0][..grid.nx * grid.ny]
                .iter()
                .filter(|&&s| s > 0.05)
                .count()
        };
        let high = area(1.0);
        let low = area(0.01);
        assert!(
            low <= high,
            "top-layer plume grew when anisotropy dropped: {low} > {high}"
        );
        assert!(high > 0, "no plume reached the top layer at a_r = 1");
    }

    #[test]
    fn halved_time_step_changes_observations_below_one_percent() {
        let grid = GridSpec::desk_scale();
        let model = heterogeneous(&grid);
        let fluid = FluidSpec::default();
        let wells = vec![
            WellSpec::injector("I1", 5, 5, 0.05),
            WellSpec::injector("I2", 14, 14, 0.05),
            WellSpec::observer("O1", 7, 7),
            WellSpec::observer("O2", 12, 12),
        ];
        let observers: Vec<&WellSpec> = wells
            .iter()
            .filter(|w| matches!(w.kind, WellKind::Observer))
            .collect();
        let schema = ObservationSchema::monitoring(&observers, grid.nz, &OBSERVATION_TIMES, &[0]);

        let run = |scale: f64| {
            let opts = SimOptions {
                time_step_scale: scale,
                ..SimOptions::default()
            };
            let fs = simulate(&model, &grid, &wells, &fluid, &OBSERVATION_TIMES, &opts).unwrap();
            let obs = extract_observations(&fs, &grid, &schema).unwrap();
            (obs, fs)
        };
        let (obs1, fs1) = run(1.0);
        let (obs2, _) = run(0.5);

        for (idx, e) in schema.entries.iter().enumerate() {
            let a = obs1.values[idx];
            let b = obs2.values[idx];
            let scale_ref = match e.quantity {
                super::super::Quantity::Saturation => 1.0,
                super::super::Quantity::Pressure => {
                    let ti = fs1.time_index(e.time_years).unwrap();
                    let row = &fs1.pressure[ti];
                    let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
                    (hi - lo).max(1e-9)
                }
            };
            let rel = (a - b).abs() / scale_ref;
            assert!(rel < 0.01, "entry {idx} ({:?}): change {rel:.4}", e.quantity);
        }
    }
}
