// temporary timing harness
use co2hm::flowproxy::simulate::{CG_ITER_COUNT, PSTEP_COUNT, SUBSTEP_COUNT};
use co2hm::flowproxy::*;
use co2hm::geomodel::*;
use co2hm::grid::GridSpec;
use std::sync::atomic::Ordering;
use std::time::Instant;

fn refinement_change(opts: &SimOptions) -> f64 {
    let grid = GridSpec::desk_scale();
    let vario = VariogramSpec::new(1500.0, 10.0).unwrap();
    let sampler = GaussianFieldSampler::new(grid, vario).unwrap();
    let y = sampler.sample(123);
    let theta = Metaparameters { mu_logk: 3.0, sigma_logk: 1.4, a_r: 0.4, d: 0.025, e: 0.08, l_h: None };
    let model = assemble_geomodel(&y, &theta).unwrap();
    let fluid = FluidSpec::default();
    let wells = vec![
        WellSpec::injector("I1", 5, 5, 0.05),
        WellSpec::injector("I2", 14, 14, 0.05),
        WellSpec::observer("O1", 7, 7),
        WellSpec::observer("O2", 12, 12),
    ];
    let observers: Vec<&WellSpec> = wells.iter().filter(|w| matches!(w.kind, WellKind::Observer)).collect();
    let schema = ObservationSchema::monitoring(&observers, grid.nz, &OBSERVATION_TIMES, &[0]);
    let run = |scale: f64| {
        let o = SimOptions { time_step_scale: scale, ..*opts };
        let fs = simulate(&model, &grid, &wells, &fluid, &OBSERVATION_TIMES, &o).unwrap();
        let obs = extract_observations(&fs, &grid, &schema).unwrap();
        (obs, fs)
    };
    let (o1, fs1) = run(1.0);
    let (o2, _) = run(0.5);
    let mut worst = 0.0f64;
    let mut worst_desc = String::new();
    for (idx, e) in schema.entries.iter().enumerate() {
        let sref = match e.quantity {
            Quantity::Saturation => 1.0,
            Quantity::Pressure => {
                let ti = fs1.time_index(e.time_years).unwrap();
                let row = &fs1.pressure[ti];
                let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
                (hi - lo).max(1e-9)
            }
        };
        let rel = (o1.values[idx] - o2.values[idx]).abs() / sref;
        if rel > worst {
            worst = rel;
            worst_desc = format!(
                "{:?} {} L{} t{} v1={:.4} v2={:.4}",
                e.quantity, e.well, e.layer, e.time_years, o1.values[idx], o2.values[idx]
            );
        }
    }
    eprintln!("    worst: {worst_desc}");
    worst
}

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

    for (name, opts) in [
        ("base cap0.10 cfl0.45 tol1e-8", SimOptions { cfl: 0.45, linsolve_tol: 1e-8, ..SimOptions::default() }),
        ("cg-cheap tol 1e-2           ", SimOptions { cfl: 0.45, linsolve_tol: 1e-2, ..SimOptions::default() }),
        ("cap0.15 cfl0.45 tol1e-8     ", SimOptions { max_pressure_dt_years: 0.15, cfl: 0.45, linsolve_tol: 1e-8, ..SimOptions::default() }),
        ("cfl0.6 ds0.08 cap0.1 tol1e-8", SimOptions { cfl: 0.6, max_ds_per_substep: 0.08, linsolve_tol: 1e-8, ..SimOptions::default() }),
    ] {
        PSTEP_COUNT.store(0, Ordering::Relaxed);
        CG_ITER_COUNT.store(0, Ordering::Relaxed);
        SUBSTEP_COUNT.store(0, Ordering::Relaxed);
        let t0 = Instant::now();
        for seed in 0..10u64 {
            let y = sampler.sample(seed);
            let theta = Metaparameters { mu_logk: 3.78, sigma_logk: 1.42, a_r: 0.56, d: 0.02, e: 0.084, l_h: None };
            let model = assemble_geomodel(&y, &theta).unwrap();
            let _ = simulate(&model, &grid, &wells, &fluid, &OBSERVATION_TIMES, &opts).unwrap();
        }
        let ms = t0.elapsed().as_secs_f64() * 100.0;
        let refine = refinement_change(&opts);
        println!(
            "{name}: {ms:.0} ms/fwd | psteps {} cg {} sub {} | refinement worst {refine:.4}",
            PSTEP_COUNT.load(Ordering::Relaxed) / 10,
            CG_ITER_COUNT.load(Ordering::Relaxed) / 10,
            SUBSTEP_COUNT.load(Ordering::Relaxed) / 10
        );
    }
}
