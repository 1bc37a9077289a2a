//! Optimal portfolio in the one-factor Heston market: myopic demand plus the
//! hedge against factor moves, checked against the HJB first-order condition.
//!
//! `cargo run --example affine_portfolio`

use fpp::affine::{self, Direction};
use fpp::{model, verify, ModelSpec, RiskParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = ModelSpec::from_json(include_str!("data/heston_model.json"))?;
    let rp = RiskParams::for_model(3.0, &model)?;
    println!("gamma = {}, p = {}, q = {:.6}", rp.gamma(), rp.p(), rp.q());

    let spec = serde_json::from_str(include_str!("data/heston_affine.json"))?;
    let sol = affine::solve_riccati(&spec, &rp, 1.0, Direction::Forward)?;
    println!("{:>6} {:>6} {:>12} {:>12} {:>12} {:>10}", "t", "y", "pi_heston", "pi_extra", "myopic", "foc gap");
    for &t in &[0.0, 0.5, 1.0] {
        for &y in &[0.02, 0.04, 0.09] {
            let pi = affine::optimal_portfolio_affine(&sol, &model, &rp, t, &[y])?;
            let myopic = model::sharpe_ratio(&model, &[y])?;
            let myopic = fpp::linalg::pinv(&model.sigma(&[y])).0 * myopic / rp.gamma();
            let u = affine::evaluate_u_affine(&sol, t, &[y])?;
            let grad = sol.phi(t) * u;
            let gap = verify::optimal_portfolio_residual(&model, &rp, u, &grad, &[y], &pi)?;
            println!("{t:>6.2} {y:>6.2} {:>12.6} {:>12.6} {:>12.6} {gap:>10.2e}", pi[0], pi[1], myopic[0]);
        }
    }
    Ok(())
}
