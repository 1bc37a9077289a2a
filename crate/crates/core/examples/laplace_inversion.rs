//! Recover a discrete spectral measure from samples of `t ↦ u(t, y₀)`, then
//! the eigenfunction values at other points from their own time series.
//!
//! `cargo run --example laplace_inversion`

use fpp::spectral::{self, Atom, SpectralMeasure};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let truth = SpectralMeasure::new(
        vec![Atom { zeta: -0.5, weight: 0.4 }, Atom { zeta: 1.0, weight: 1.0 }, Atom { zeta: 2.5, weight: 0.7 }],
        vec![0.0],
    )?;
    let series = spectral::sample_series(&truth, 41, 1.0);
    let fit = spectral::invert_laplace_discrete(&series, 3)?;
    println!("Hankel condition {:.2e}, refinement iterations {}, max residual {:.2e}", fit.hankel_condition, fit.refinement_iterations, fit.max_residual);
    for (f, t) in fit.atoms.iter().zip(truth.atoms()) {
        println!("  zeta {:>9.6} (true {:>5.2})  weight {:.6} (true {:.2})", f.zeta, t.zeta, f.weight, t.weight);
    }
    let nu = fit.into_measure(vec![0.0])?;

    // Time series at other points, generated from known ψ values.
    let psi = |y: f64| [(-0.8 * y).exp(), (0.3 * y).exp(), (1.1 * y).exp()];
    let samples: Vec<spectral::PointSeries> = [-1.0, 0.5, 1.0]
        .iter()
        .map(|&y| {
            let p = psi(y);
            let s = (0..21)
                .map(|j| {
                    let t = j as f64 * 0.05;
                    (t, truth.atoms().iter().zip(p).map(|(a, v)| a.weight * v * (-a.zeta * t).exp()).sum())
                })
                .collect();
            (vec![y], s)
        })
        .collect();
    let sel = spectral::recover_selection(&samples, &nu, 1e-6)?;
    println!("\nrecovered eigenfunction values:");
    for (y, _) in &samples {
        let got: Vec<f64> = sel.functions.iter().map(|f| f.eval(&sel.y0, y)).collect::<Result<_, _>>()?;
        println!("  y = {:>5.2}: {:?}  (true {:?})", y[0], got, psi(y[0]));
    }

    // Closely spaced exponents are not resolvable in double precision.
    let crowded = SpectralMeasure::new((0..4).map(|i| Atom { zeta: 0.5 + 0.1 * i as f64, weight: 0.5 }).collect(), vec![0.0])?;
    match spectral::invert_laplace_discrete(&spectral::sample_series(&crowded, 41, 1.0), 4) {
        Ok(f) => println!("\ncrowded measure fitted, residual {:.2e}", f.max_residual),
        Err(e) => println!("\ncrowded measure refused: {e}"),
    }
    Ok(())
}
