//! Monte Carlo Feynman–Kac estimate of the linear PDE solution against the
//! Riccati closed form.
//!
//! `cargo run --release --example feynman_kac`

use fpp::affine::{self, Direction, SquareRootMarket};
use fpp::sim::{self, BoundaryPolicy, SimulationConfig};
use fpp::{model, RiskParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let market = SquareRootMarket {
        m: vec![vec![-2.0]],
        w: vec![0.08],
        l: vec![0.09],
        variance_scale: vec![1.0],
        sharpe_loading: vec![2.0],
        p: 0.25,
        extra_mu: vec![],
        extra_sigma: vec![],
    };
    let spec = market.model()?;
    let rp = RiskParams::new(3.0, market.p)?;
    let h = vec![1.0];
    let horizon = 1.0;
    let sol = affine::solve_riccati(&market.affine_spec(&rp, h.clone(), 0.0), &rp, horizon, Direction::Backward)?;
    let gen = model::generator_coefficients(&spec, &rp)?;
    let terminal = move |y: &[f64]| (h[0] * y[0]).exp();

    let mut cfg = SimulationConfig::new(2e-3, horizon, 20_000, 7, vec![0.04]);
    cfg.boundary_policy = BoundaryPolicy::FullTruncation;
    println!("{:>5} {:>6} {:>12} {:>12} {:>10} {:>7}", "tau", "y", "monte carlo", "exact", "std err", "z");
    for &(tau, y) in &[(0.25, 0.04), (0.5, 0.04), (1.0, 0.04), (1.0, 0.1)] {
        let est = sim::feynman_kac_estimate(&gen, &spec.domain, &terminal, tau, &[y], &cfg)?;
        let exact = affine::evaluate_u_affine(&sol, horizon - tau, &[y])?;
        println!("{tau:>5.2} {y:>6.2} {:>12.6} {exact:>12.6} {:>10.2e} {:>7.2}", est.mean, est.std_error, est.z_score(exact));
    }
    Ok(())
}
