//! Simulate the Heston market under several strategies and write the
//! path bundle in binary and CSV form.
//!
//! `cargo run --release --example simulate_paths [out_dir]`

use std::path::PathBuf;
use std::sync::Arc;

use fpp::affine::{self, Direction};
use fpp::sim::{self, AffineOptimalStrategy, MyopicStrategy, PerturbedStrategy, SimulationConfig, Strategy, ZeroStrategy};
use fpp::{ModelSpec, RiskParams};
use nalgebra::DVector;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/simulate_paths".into()));
    std::fs::create_dir_all(&out)?;
    let model = ModelSpec::from_json(include_str!("data/heston_model.json"))?;
    let cfg: SimulationConfig = serde_json::from_str(include_str!("data/sim_config.json"))?;
    let rp = RiskParams::for_model(3.0, &model)?;
    let spec = serde_json::from_str(include_str!("data/heston_affine.json"))?;
    let sol = Arc::new(affine::solve_riccati(&spec, &rp, cfg.horizon, Direction::Forward)?);

    let optimal: Arc<dyn Strategy> = Arc::new(AffineOptimalStrategy { solution: sol, rp });
    let perturbed = PerturbedStrategy { base: optimal.clone(), delta: DVector::from_element(model.n, 0.2) };
    let myopic = MyopicStrategy { gamma: rp.gamma() };
    let strategies: [&dyn Strategy; 4] = [optimal.as_ref(), &perturbed, &myopic, &ZeroStrategy];

    let bundle = sim::simulate(&model, &cfg, &strategies)?;
    println!("{} paths, {} recorded times, dt = {}", bundle.n_paths, bundle.n_times(), bundle.dt);
    let last = bundle.n_times() - 1;
    for (i, name) in bundle.strategy_names.iter().enumerate() {
        let xs: Vec<f64> = (0..bundle.n_paths).map(|p| bundle.x_at(i, p, last)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let adm = sim::admissibility_check(&bundle, i);
        println!("{name:<24} mean X_T = {mean:.5}  max ∫|σπ|²dt = {:.4}  finite = {}", adm.max_qv_integral, adm.all_finite);
    }
    let y_mean = (0..bundle.n_paths).map(|p| bundle.y_at(p, last)[0]).sum::<f64>() / bundle.n_paths as f64;
    println!("mean Y_T = {y_mean:.5}");

    bundle.write_binary(&out.join("paths.bin"))?;
    let files = bundle.write_csv(&out)?;
    let back = sim::PathBundle::read_binary(&out.join("paths.bin"))?;
    println!("wrote {} CSV files and paths.bin to {} (round trip equal: {})", files.len(), out.display(), back == bundle);
    Ok(())
}
