// temporary: per-solve CG iteration profile
use co2hm::flowproxy::simulate::{CG_ITER_COUNT, PSTEP_COUNT};
use co2hm::flowproxy::*;
use co2hm::geomodel::*;
use co2hm::grid::GridSpec;
use std::sync::atomic::Ordering;

fn main() {
    let grid = GridSpec::desk_scale();
    let vario = VariogramSpec::new(1500.0, 10.0).unwrap();
    let sampler = GaussianFieldSampler::new(grid, vario).unwrap();
    let fluid = FluidSpec::default();
    let wells = vec![
        WellSpec::injector("I1", 5, 5, 0.05),
        WellSpec::injector("I2", 5, 14, 0.05),
        WellSpec::injector("I3", 14, 5, 0.05),
        WellSpec::injector("I4", 14, 14, 0.05),
    ];
    let y = sampler.sample(3);
    let theta = Metaparameters { mu_logk: 3.78, sigma_logk: 1.42, a_r: 0.56, d: 0.02, e: 0.084, l_h: None };
    let model = assemble_geomodel(&y, &theta).unwrap();
    let opts = SimOptions { cfl: 0.45, linsolve_tol: 1e-8, ..SimOptions::default() };
    // one output at a time to sample the counter
    let mut prev_c = 0usize;
    let mut prev_p = 0usize;
    for k in 1..=9 {
        let t = k as f64 * 0.5;
        let _ = simulate(&model, &grid, &wells, &fluid, &[t], &opts).unwrap();
        let c = CG_ITER_COUNT.load(Ordering::Relaxed);
        let p = PSTEP_COUNT.load(Ordering::Relaxed);
        println!("horizon {t:.1} yr: psteps {} cumulative-iters {} (avg {:.0})", p - prev_p, c - prev_c, (c - prev_c) as f64 / (p - prev_p).max(1) as f64);
        prev_c = c; prev_p = p;
    }
}
