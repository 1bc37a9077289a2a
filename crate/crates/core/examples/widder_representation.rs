//! Build a forward performance process as a mixture of exponential
//! eigenfunctions and check that it solves both the linear and the
//! distorted PDE.
//!
//! `cargo run --example widder_representation`

use nalgebra::{DMatrix, DVector};

use fpp::model::GeneratorCoefficients;
use fpp::spectral::{self, Atom, Eigenfunction, EigenfunctionSelection, SpectralMeasure};
use fpp::verify::{self, Candidate, FdOptions};
use fpp::RiskParams;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Constant one-factor generator: ½a u'' + b u' + P u.
    let (a, b, pot) = (0.5, 0.2, -0.1);
    let gen = GeneratorCoefficients::constant(DMatrix::from_element(1, 1, a), DVector::from_element(1, b), pot);
    let rp = RiskParams::new(2.0, 0.5)?;

    // ψ = exp(s y) is an eigenfunction with ζ = ½as² + bs + P.
    let slopes = [-0.5, 0.0, 0.6, 1.2];
    let weights = [0.3, 1.0, 0.5, 0.2];
    let zeta = |s: f64| 0.5 * a * s * s + b * s + pot;
    let atoms = slopes.iter().zip(weights).map(|(&s, w)| Atom { zeta: zeta(s), weight: w }).collect();
    let nu = SpectralMeasure::new(atoms, vec![0.0])?;
    let mut sorted: Vec<f64> = slopes.to_vec();
    sorted.sort_by(|x, y| zeta(*x).total_cmp(&zeta(*y)));
    let sel = EigenfunctionSelection::new(vec![0.0], sorted.iter().map(|&s| Eigenfunction::Exponential { slope: vec![s] }).collect())?;
    for (atom, s) in nu.atoms().iter().zip(&sorted) {
        println!("zeta = {:>7.4}  weight = {:.2}  slope = {s:>5.2}", atom.zeta, atom.weight);
    }

    println!("\n{:>5} {:>6} {:>12} {:>14}", "t", "y", "u(t,y)", "U(t,1,y)");
    for &t in &[0.0, 0.5, 1.0] {
        for &y in &[-1.0, 0.0, 1.0] {
            let u = spectral::widder_evaluate(&nu, &sel, t, &[y])?;
            let v = spectral::fpp_from_measure(&nu, &sel, &rp, t, 1.0, &[y])?;
            println!("{t:>5.2} {y:>6.2} {u:>12.6} {v:>14.6}");
        }
    }

    let grid: Vec<(f64, Vec<f64>)> = (0..5).flat_map(|i| (0..5).map(move |j| (0.25 * i as f64, vec![-1.0 + 0.5 * j as f64]))).collect();
    let jet = |t: f64, y: &[f64]| spectral::widder_jet(&nu, &sel, t, y).expect("exponential selections have jets");
    let exact = verify::distortion_roundtrip(Candidate::Jet(&jet), &rp, &gen, &grid, FdOptions::default())?;
    let values = |t: f64, y: &[f64]| spectral::widder_evaluate(&nu, &sel, t, y).unwrap_or(f64::NAN);
    let fd = verify::distortion_roundtrip(Candidate::Values(&values), &rp, &gen, &grid, FdOptions::default())?;
    println!("\nmax PDE residuals over {} points:", grid.len());
    println!("  analytic jet: linear {:.2e}, distorted {:.2e}", exact.linear.max_abs_residual, exact.nonlinear.max_abs_residual);
    println!("  finite diff : linear {:.2e}, distorted {:.2e}", fd.linear.max_abs_residual, fd.nonlinear.max_abs_residual);
    Ok(())
}
