//! Solve the matrix Riccati system of an affine model in closed form and
//! numerically, and compare the two.
//!
//! `cargo run --example riccati_closed_form`

use fpp::affine::{self, AffineSpec, Direction};
use fpp::RiskParams;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec: AffineSpec = serde_json::from_str(include_str!("data/heston_affine.json"))?;
    let rp = RiskParams::new(3.0, 0.25)?;
    for direction in [Direction::Forward, Direction::Backward] {
        let cf = affine::solve_riccati_closed_form(&spec, &rp, 1.0, direction)?;
        let num = affine::solve_riccati_numeric(&spec, &rp, 1.0, direction)?;
        println!("{direction:?} (anchor t = {}):", cf.anchor_time());
        for c in cf.components().unwrap_or_default() {
            println!("  D = {:.6}, z+ = {:.6}, z- = {:.6}, chi = {:.6}", c.d, c.z_plus, c.z_minus, c.chi);
        }
        println!("  {:>5} {:>14} {:>14} {:>10}", "t", "phi", "theta", "gap");
        for i in 0..=5 {
            let t = i as f64 / 5.0;
            let gap = (cf.phi(t) - num.phi(t)).amax().max((cf.theta(t) - num.theta(t)).abs());
            println!("  {t:>5.2} {:>14.8} {:>14.8} {gap:>10.2e}", cf.phi(t)[0], cf.theta(t));
        }
        let (rp_phi, rp_theta) = num.max_residuals(200);
        println!("  numeric ODE residuals: phi {rp_phi:.2e}, theta {rp_theta:.2e}");
    }

    // With a negative discriminant the solution escapes in finite time.
    let mut unstable = spec.clone();
    unstable.m = vec![vec![0.5]];
    unstable.h = vec![2.0];
    match affine::solve_riccati(&unstable, &RiskParams::new(0.5, 0.5)?, 10.0, Direction::Forward) {
        Ok(_) => println!("no blow-up"),
        Err(e) => println!("unstable spec: {e}"),
    }
    Ok(())
}
