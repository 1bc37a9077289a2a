//! Project an estimated correlation block onto the EVE class and pick `p`.
//!
//! `cargo run --example eve_projection [rho.csv]`

use fpp::eve::{self, PNorm};
use fpp::linalg;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/data/rho.csv").into());
    let mut rows = Vec::new();
    for rec in csv::ReaderBuilder::new().has_headers(false).from_path(&path)?.records() {
        rows.push(rec?.iter().map(|s| s.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>()?);
    }
    let rho_hat = linalg::from_rows(&rows);
    println!("rho_hat ({}x{}):{rho_hat}", rho_hat.nrows(), rho_hat.ncols());

    let proj = eve::project_eve(&rho_hat)?;
    println!("r* = {:.6}  (unclamped {:.6})", proj.r_star, proj.r_unclamped);
    println!("Q*:{}", proj.q_star);
    println!("|rho_hat - r* Q*|_F = {:.3e}", proj.frobenius_distance);

    let theta = eve::gram_eigenvalues(&rho_hat);
    println!("eigenvalues of rho_hat^T rho_hat: {theta:?}");
    for norm in PNorm::ALL {
        let p = eve::select_p_from_eigenvalues(&theta, norm);
        println!("{norm:>9?}: p = {p:.6}, distance = {:.3e}", norm.distance(&theta, p));
    }
    Ok(())
}
