use enlargement_core::density_model::{simulate, uniform_grid, ModelParams};
use enlargement_core::drift_engine::drift_sorted;
use enlargement_core::marginal_integrator::QuadratureConfig;
use std::time::Instant;

fn main() {
    let params = ModelParams::default_n(2);
    let grid = uniform_grid(params.t_max, 200);
    let cfg = QuadratureConfig::default();
    let t0 = Instant::now();
    let mut acc = 0.0;
    for p in 0..20 {
        let scenario = simulate(&params, 1, &grid, 42, p);
        let d = drift_sorted(&params, &scenario, &cfg).unwrap();
        acc += d.final_cumulative();
    }
    println!("20 paths x 200 steps: {:?} ({acc:.4})", t0.elapsed());
}
