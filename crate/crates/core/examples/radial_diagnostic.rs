//! Radial integral diagnostic for rotationally symmetric potentials
//! `P₀(r) = Σ cⱼ r^{-j}` in dimension `k`.
//!
//! `cargo run --example radial_diagnostic`

use fpp::spectral;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cases: [(&str, f64, usize, Vec<f64>); 4] = [
        ("free, k = 3", 0.0, 3, vec![0.0]),
        ("free, k = 2", 0.0, 2, vec![0.0]),
        ("oscillating, k = 3", 1.0, 3, vec![0.0]),
        ("attractive tail, k = 3", -0.5, 3, vec![0.0, 0.0, 0.3]),
    ];
    for (label, zeta, k, coeffs) in cases {
        let p0 = |r: f64| coeffs.iter().enumerate().map(|(j, c)| c * r.powi(-(j as i32))).sum::<f64>();
        let d = spectral::radial_ode_diagnostic(&p0, zeta, k, 50.0, 2001)?;
        let integral = d.truncated_integral.map_or("n/a".to_string(), |v| format!("{v:.4e}"));
        let zero = d.first_zero.map_or("-".to_string(), |z| format!("{z:.4}"));
        println!("{label:<24} integral {integral:>11}  first zero {zero:>7}  growth flag {}", d.growth_flag);
        for (r, v) in &d.partial_integrals {
            println!("    up to r = {r:>5.1}: {v:.4e}");
        }
    }
    Ok(())
}
