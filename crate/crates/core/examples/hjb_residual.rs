//! Finite-difference HJB residual of the affine value function, with the
//! convergence order read off two step sizes.
//!
//! `cargo run --release --example hjb_residual`

use fpp::affine::{self, Direction};
use fpp::verify::{self, FdOptions, Stencil};
use fpp::{ModelSpec, RiskParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = ModelSpec::from_json(include_str!("data/heston_model.json"))?;
    let rp = RiskParams::for_model(3.0, &model)?;
    let spec = serde_json::from_str(include_str!("data/heston_affine.json"))?;
    let sol = affine::solve_riccati(&spec, &rp, 1.0, Direction::Forward)?;
    let v = |t: f64, x: f64, y: &[f64]| affine::evaluate_fpp(&sol, &rp, t, x, y).unwrap_or(f64::NAN);

    let mut grid = Vec::new();
    for i in 1..5 {
        for &x in &[0.5, 1.0, 2.0] {
            for &y in &[0.02, 0.04, 0.08, 0.16] {
                grid.push((0.2 * i as f64, x, vec![y]));
            }
        }
    }
    // The fourth-order stencil hits round-off near 1e-9, so it is probed at larger steps (the wide stencil must stay inside y ≥ 0).
    for (stencil, h) in [(Stencil::Central2, 2e-3), (Stencil::Central4, 1e-2)] {
        let coarse = verify::hjb_residual(&v, &model, &grid, FdOptions { step: h, stencil, keep_points: false })?;
        let fine = verify::hjb_residual(&v, &model, &grid, FdOptions { step: h / 2.0, stencil, keep_points: false })?;
        let slope = verify::richardson_slope(coarse.max_abs_residual, fine.max_abs_residual, 2.0);
        println!(
            "{stencil:?}: max residual {:.3e} (h = {h:e}), {:.3e} (h = {:e}), observed order {slope:.2}",
            coarse.max_abs_residual,
            fine.max_abs_residual,
            h / 2.0
        );
    }
    Ok(())
}
