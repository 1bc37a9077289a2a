//! Shoot one-factor eigenfunctions of the Heston generator and check positivity.
//!
//! `cargo run --example eigenfunction_shooting`

use fpp::{model, spectral, ModelSpec, RiskParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ModelSpec::from_json(include_str!("data/heston_model.json"))?;
    let rp = RiskParams::for_model(3.0, &spec)?;
    let gen = model::generator_coefficients(&spec, &rp)?;
    let grid: Vec<f64> = (0..=60).map(|i| 0.01 + 0.01 * i as f64).collect();
    let y0 = 0.04;

    println!("{:>8} {:>8} {:>9} {:>12} {:>12}", "zeta", "slope", "positive", "psi(0.61)", "sign change");
    for &zeta in &[-0.5, 0.0, 0.5] {
        for &slope in &[-20.0, 0.0, 5.0] {
            let ef = spectral::solve_eigenfunction_1d(&gen, zeta, y0, slope, &grid)?;
            let last = ef.psi.last().copied().unwrap_or(f64::NAN);
            let change = ef.first_sign_change.map_or("-".to_string(), |y| format!("{y:.4}"));
            println!("{zeta:>8.2} {slope:>8.2} {:>9} {last:>12.4e} {change:>12}", ef.is_positive());
        }
    }

    // Sampled solutions become eigenfunctions interpolated by cubic Hermite splines.
    let ef = spectral::solve_eigenfunction_1d(&gen, 0.0, y0, 0.0, &grid)?;
    let psi = ef.to_eigenfunction();
    for y in [0.04, 0.105, 0.2, 0.333] {
        println!("psi({y}) = {:.6}", psi.eval(&[y0], &[y])?);
    }
    Ok(())
}
