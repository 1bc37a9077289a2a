//! Grid diagnostics for a model file: EVE structure, range condition,
//! ellipticity and coefficient bounds.
//!
//! `cargo run --example model_validation [model.json]`

use fpp::model;
use fpp::ModelSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let text = match std::env::args().nth(1) {
        Some(p) => std::fs::read_to_string(p)?,
        None => include_str!("data/heston_model.json").to_string(),
    };
    let spec = ModelSpec::from_json(&text)?;
    println!("n = {}, k = {}, d_W = {}, d_B = {}", spec.n, spec.k, spec.d_w, spec.d_b);
    println!("EVE p = {:?}", spec.eve_p(1e-10));

    // Tensor grid over [0.01, 0.51]^k, 11 nodes per axis; σ degenerates on the boundary.
    let mut grid: Vec<Vec<f64>> = vec![vec![]];
    for _ in 0..spec.k {
        grid = grid.into_iter().flat_map(|p| (0..=10).map(move |i| [p.clone(), vec![0.01 + 0.05 * i as f64]].concat())).collect();
    }
    let report = model::validate(&spec, &grid);
    println!("{}", serde_json::to_string_pretty(&report)?);
    println!("all checks passed: {}", report.all_passed());

    let singular = model::constant_model(vec![0.05, 0.05], vec![vec![0.2, 0.2], vec![0.2, 0.2]], vec![0.0], vec![vec![1.0]], vec![vec![0.5], vec![0.0]])?;
    let bad = model::validate(&singular, &[vec![0.0]]);
    println!("degenerate sigma: rank-deficient at {:?}, passed = {}", bad.rank_deficient_points, bad.all_passed());
    Ok(())
}
