//! Monte Carlo simulation of factors, prices and wealth.
//!
//! Factors follow `dY = α dt + κᵀ dB` with `B = ρᵀW + AᵀW⊥`; prices and wealth
//! use exponential (log-Euler) updates so they stay positive by construction:
//!
//! ```text
//! S_i ← S_i exp((μ_i − ½|σ_{·i}|²)Δt + σ_{·i}ᵀΔW)
//! X   ← X exp((σπ)ᵀλ Δt − ½|σπ|²Δt + (σπ)ᵀΔW)
//! ```
//!
//! Every path draws from its own ChaCha8 stream (`seed`, path index), so
//! results do not depend on thread scheduling.

use std::cell::OnceCell;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affine::RiccatiSolution;
use crate::linalg;
use crate::model::{self, Domain, GeneratorCoefficients, ModelError, ModelSpec, RiskParams};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("non-finite {what} on path {path} at step {step}")]
    NonFinite { path: usize, step: usize, what: String },
    #[error("strategy `{name}` returned {got} positions for {n} stocks")]
    StrategyDimension { name: String, got: usize, n: usize },
    #[error("AᵀA + ρᵀρ deviates from I by {0:.3e}")]
    Loading(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(String),
}

fn cfg_err(field: &str, reason: impl Into<String>) -> SimError {
    SimError::Config { field: field.into(), reason: reason.into() }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    EulerMaruyama,
}

/// Treatment of factor states outside the domain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryPolicy {
    /// Coefficients are evaluated at the state clamped into the domain; the raw
    /// state is kept.
    #[default]
    FullTruncation,
    /// The path is frozen at the first exit.
    Absorb,
    /// The state is mirrored back across the violated bound.
    Reflect,
}

impl std::str::FromStr for BoundaryPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full-truncation" | "truncate" => Ok(BoundaryPolicy::FullTruncation),
            "absorb" => Ok(BoundaryPolicy::Absorb),
            "reflect" => Ok(BoundaryPolicy::Reflect),
            other => Err(format!("unknown boundary policy `{other}` (expected full-truncation|absorb|reflect)")),
        }
    }
}

fn default_x0() -> f64 {
    1.0
}

fn default_record_every() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub dt: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub boundary_policy: BoundaryPolicy,
    #[serde(default = "default_x0")]
    pub x0: f64,
    pub y0: Vec<f64>,
    /// Initial prices; all ones when empty.
    #[serde(default)]
    pub s0: Vec<f64>,
    /// Keep every `record_every`-th step (the final step is always kept).
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

impl SimulationConfig {
    pub fn new(dt: f64, horizon: f64, n_paths: usize, seed: u64, y0: Vec<f64>) -> Self {
        SimulationConfig {
            dt,
            horizon,
            n_paths,
            seed,
            scheme: Scheme::EulerMaruyama,
            boundary_policy: BoundaryPolicy::FullTruncation,
            x0: 1.0,
            y0,
            s0: vec![],
            record_every: 1,
        }
    }

    pub fn check(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(cfg_err("dt", "must be positive"));
        }
        if !(self.horizon.is_finite() && self.dt <= self.horizon) {
            return Err(cfg_err("horizon", format!("need dt ≤ T, got dt = {}, T = {}", self.dt, self.horizon)));
        }
        if self.n_paths == 0 {
            return Err(cfg_err("n_paths", "need at least one path"));
        }
        if !(self.x0 > 0.0) {
            return Err(cfg_err("x0", "initial wealth must be positive"));
        }
        if self.record_every == 0 {
            return Err(cfg_err("record_every", "must be at least 1"));
        }
        if self.s0.iter().any(|&s| !(s > 0.0)) {
            return Err(cfg_err("s0", "prices must be positive"));
        }
        Ok(())
    }

    /// Number of steps; the step actually used is `T / n_steps ≤ dt`.
    pub fn n_steps(&self) -> usize {
        ((self.horizon / self.dt) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.n_steps() as f64
    }

    fn retained_steps(&self) -> Vec<usize> {
        let n = self.n_steps();
        let mut v: Vec<usize> = (0..=n).step_by(self.record_every).collect();
        if *v.last().unwrap() != n {
            v.push(n);
        }
        v
    }
}

/// Market quantities at one step, shared by every strategy.
pub struct MarketState<'a> {
    pub t: f64,
    pub y: &'a [f64],
    pub mu: &'a DVector<f64>,
    pub sigma: &'a DMatrix<f64>,
    pub lambda: &'a DVector<f64>,
    pub kappa: &'a DMatrix<f64>,
    pub rho: &'a DMatrix<f64>,
    sigma_pinv: OnceCell<DMatrix<f64>>,
}

impl<'a> MarketState<'a> {
    pub fn new(
        t: f64,
        y: &'a [f64],
        mu: &'a DVector<f64>,
        sigma: &'a DMatrix<f64>,
        lambda: &'a DVector<f64>,
        kappa: &'a DMatrix<f64>,
        rho: &'a DMatrix<f64>,
    ) -> Self {
        MarketState { t, y, mu, sigma, lambda, kappa, rho, sigma_pinv: OnceCell::new() }
    }

    /// `σ⁻` (computed once per step on first use).
    pub fn sigma_pinv(&self) -> &DMatrix<f64> {
        self.sigma_pinv.get_or_init(|| fast_pinv(self.sigma))
    }
}

fn fast_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.is_square() {
        if let Some(inv) = m.clone().try_inverse() {
            if inv.iter().all(|v| v.is_finite()) && inv.amax() * m.amax() < 1.0 / linalg::RANK_CUTOFF {
                return inv;
            }
        }
    }
    linalg::pinv(m).0
}

/// Feedback portfolio `π(t, y, x)` in fractions of wealth per stock.
pub trait Strategy: Send + Sync {
    fn name(&self) -> String;
    fn position(&self, m: &MarketState<'_>, x: f64) -> DVector<f64>;
}

pub struct ZeroStrategy;

impl Strategy for ZeroStrategy {
    fn name(&self) -> String {
        "zero".into()
    }
    fn position(&self, m: &MarketState<'_>, _x: f64) -> DVector<f64> {
        DVector::zeros(m.mu.len())
    }
}

pub struct ConstantStrategy(pub DVector<f64>);

impl Strategy for ConstantStrategy {
    fn name(&self) -> String {
        "constant".into()
    }
    fn position(&self, _m: &MarketState<'_>, _x: f64) -> DVector<f64> {
        self.0.clone()
    }
}

/// `(1/γ) σ⁻ λ`, the Merton portfolio without hedging demand.
pub struct MyopicStrategy {
    pub gamma: f64,
}

impl Strategy for MyopicStrategy {
    fn name(&self) -> String {
        "myopic".into()
    }
    fn position(&self, m: &MarketState<'_>, _x: f64) -> DVector<f64> {
        m.sigma_pinv() * m.lambda / self.gamma
    }
}

/// `(1/γ) σ⁻ (λ + q ρ κ Φ(t))` from a Riccati solution.
pub struct AffineOptimalStrategy {
    pub solution: Arc<RiccatiSolution>,
    pub rp: RiskParams,
}

impl Strategy for AffineOptimalStrategy {
    fn name(&self) -> String {
        "affine-optimal".into()
    }
    fn position(&self, m: &MarketState<'_>, _x: f64) -> DVector<f64> {
        let t = m.t.clamp(0.0, self.solution.horizon);
        let hedge = m.rho * (m.kappa * self.solution.phi(t)) * self.rp.q();
        m.sigma_pinv() * (m.lambda + hedge) / self.rp.gamma()
    }
}

/// `base + δ`, named `<base>+delta<δᵢ>` after the entry of largest magnitude (sign kept).
pub struct PerturbedStrategy {
    pub base: Arc<dyn Strategy>,
    pub delta: DVector<f64>,
}

impl Strategy for PerturbedStrategy {
    fn name(&self) -> String {
        let lead = self.delta.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        format!("{}+delta{}", self.base.name(), lead)
    }
    fn position(&self, m: &MarketState<'_>, x: f64) -> DVector<f64> {
        self.base.position(m, x) + &self.delta
    }
}

type FeedbackFn = dyn Fn(&MarketState<'_>, f64) -> DVector<f64> + Send + Sync;

/// Strategy defined by a closure.
pub struct FnStrategy {
    pub label: String,
    pub f: Arc<FeedbackFn>,
}

impl Strategy for FnStrategy {
    fn name(&self) -> String {
        self.label.clone()
    }
    fn position(&self, m: &MarketState<'_>, x: f64) -> DVector<f64> {
        (self.f)(m, x)
    }
}

/// Discretised integrals `∫|(σπ)ᵀλ|dt` and `∫|σπ|²dt` along one path.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityPath {
    pub drift_integral: f64,
    pub qv_integral: f64,
    /// First step at which the strategy returned a non-finite position.
    pub first_non_finite: Option<usize>,
}

/// Retained paths. Arrays are path-major: `[path][time][component]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathBundle {
    pub times: Vec<f64>,
    pub dt: f64,
    pub n_paths: usize,
    pub d_w: usize,
    pub d_b: usize,
    pub k: usize,
    pub n: usize,
    pub strategy_names: Vec<String>,
    pub w: Vec<f64>,
    pub wperp: Vec<f64>,
    pub b: Vec<f64>,
    pub y: Vec<f64>,
    pub s: Vec<f64>,
    /// `x[strategy][path·n_times + j]`.
    pub x: Vec<Vec<f64>>,
    pub exit_time: Vec<Option<f64>>,
    pub admissibility: Vec<Vec<AdmissibilityPath>>,
}

impl PathBundle {
    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    fn slice<'a>(&self, v: &'a [f64], dim: usize, path: usize, j: usize) -> &'a [f64] {
        let o = (path * self.n_times() + j) * dim;
        &v[o..o + dim]
    }

    pub fn w_at(&self, path: usize, j: usize) -> &[f64] {
        self.slice(&self.w, self.d_w, path, j)
    }
    pub fn wperp_at(&self, path: usize, j: usize) -> &[f64] {
        self.slice(&self.wperp, self.d_b, path, j)
    }
    pub fn b_at(&self, path: usize, j: usize) -> &[f64] {
        self.slice(&self.b, self.d_b, path, j)
    }
    pub fn y_at(&self, path: usize, j: usize) -> &[f64] {
        self.slice(&self.y, self.k, path, j)
    }
    pub fn s_at(&self, path: usize, j: usize) -> &[f64] {
        self.slice(&self.s, self.n, path, j)
    }
    pub fn x_at(&self, strategy: usize, path: usize, j: usize) -> f64 {
        self.x[strategy][path * self.n_times() + j]
    }

    pub fn strategy_index(&self, name: &str) -> Option<usize> {
        self.strategy_names.iter().position(|s| s == name)
    }

    fn columns(&self) -> Vec<(String, usize, &[f64])> {
        let mut cols: Vec<(String, usize, &[f64])> = vec![
            ("W".into(), self.d_w, &self.w),
            ("Wperp".into(), self.d_b, &self.wperp),
            ("B".into(), self.d_b, &self.b),
            ("Y".into(), self.k, &self.y),
            ("S".into(), self.n, &self.s),
        ];
        for (name, x) in self.strategy_names.iter().zip(&self.x) {
            cols.push((format!("X_{name}"), 1, x));
        }
        cols
    }

    /// One CSV per variable (`W.csv`, `Y.csv`, `X_<strategy>.csv`, …) with
    /// columns `path, t, <var>_1, …`, plus `exit_time.csv`. Returns the files written.
    pub fn write_csv(&self, dir: &Path) -> Result<Vec<PathBuf>, SimError> {
        let io = |e: csv::Error| SimError::Io(e.to_string());
        std::fs::create_dir_all(dir).map_err(|e| SimError::Io(e.to_string()))?;
        let mut out = Vec::new();
        for (name, dim, data) in self.columns() {
            let path = dir.join(format!("{name}.csv"));
            let mut w = csv::Writer::from_path(&path).map_err(io)?;
            let mut header = vec!["path".to_string(), "t".to_string()];
            header.extend((1..=dim).map(|i| format!("{name}_{i}")));
            w.write_record(&header).map_err(io)?;
            for p in 0..self.n_paths {
                for (j, t) in self.times.iter().enumerate() {
                    let mut rec = vec![p.to_string(), format!("{t:e}")];
                    rec.extend(self.slice(data, dim, p, j).iter().map(|v| format!("{v:e}")));
                    w.write_record(&rec).map_err(io)?;
                }
            }
            w.flush().map_err(|e| SimError::Io(e.to_string()))?;
            out.push(path);
        }
        let path = dir.join("exit_time.csv");
        let mut w = csv::Writer::from_path(&path).map_err(io)?;
        w.write_record(["path", "tau"]).map_err(io)?;
        for (p, tau) in self.exit_time.iter().enumerate() {
            w.write_record([p.to_string(), tau.map_or(String::new(), |t| format!("{t:e}"))]).map_err(io)?;
        }
        w.flush().map_err(|e| SimError::Io(e.to_string()))?;
        out.push(path);
        Ok(out)
    }

    /// Columnar binary: magic, little-endian `u64` header length, JSON header,
    /// then each column as little-endian `f64`.
    pub fn write_binary(&self, path: &Path) -> Result<(), SimError> {
        let io = |e: std::io::Error| SimError::Io(e.to_string());
        let header = BinaryHeader {
            times: self.times.clone(),
            dt: self.dt,
            n_paths: self.n_paths,
            d_w: self.d_w,
            d_b: self.d_b,
            k: self.k,
            n: self.n,
            strategy_names: self.strategy_names.clone(),
            exit_time: self.exit_time.clone(),
            admissibility: self.admissibility.clone(),
            columns: self.columns().iter().map(|(n, d, v)| (n.clone(), *d, v.len())).collect(),
        };
        let text = serde_json::to_vec(&header).map_err(|e| SimError::Io(e.to_string()))?;
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(BINARY_MAGIC).map_err(io)?;
        w.write_all(&(text.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&text).map_err(io)?;
        for (_, _, data) in self.columns() {
            for v in data {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_binary(path: &Path) -> Result<PathBundle, SimError> {
        let io = |e: std::io::Error| SimError::Io(format!("{}: {e}", path.display()));
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != BINARY_MAGIC {
            return Err(SimError::Io(format!("{}: not a path bundle", path.display())));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let mut text = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut text).map_err(io)?;
        let h: BinaryHeader = serde_json::from_slice(&text).map_err(|e| SimError::Io(e.to_string()))?;
        let mut cols = Vec::with_capacity(h.columns.len());
        let mut buf = [0u8; 8];
        for (_, _, len) in &h.columns {
            let mut v = Vec::with_capacity(*len);
            for _ in 0..*len {
                r.read_exact(&mut buf).map_err(io)?;
                v.push(f64::from_le_bytes(buf));
            }
            cols.push(v);
        }
        if cols.len() != 5 + h.strategy_names.len() {
            return Err(SimError::Io("column count does not match strategies".into()));
        }
        let mut it = cols.into_iter();
        let mut next = || it.next().expect("counted");
        let (w, wperp, b, y, s) = (next(), next(), next(), next(), next());
        let x = (0..h.strategy_names.len()).map(|_| next()).collect();
        Ok(PathBundle {
            times: h.times,
            dt: h.dt,
            n_paths: h.n_paths,
            d_w: h.d_w,
            d_b: h.d_b,
            k: h.k,
            n: h.n,
            strategy_names: h.strategy_names,
            w,
            wperp,
            b,
            y,
            s,
            x,
            exit_time: h.exit_time,
            admissibility: h.admissibility,
        })
    }
}

const BINARY_MAGIC: &[u8; 8] = b"FPPPATH1";

#[derive(Serialize, Deserialize)]
struct BinaryHeader {
    times: Vec<f64>,
    dt: f64,
    n_paths: usize,
    d_w: usize,
    d_b: usize,
    k: usize,
    n: usize,
    strategy_names: Vec<String>,
    exit_time: Vec<Option<f64>>,
    admissibility: Vec<Vec<AdmissibilityPath>>,
    columns: Vec<(String, usize, usize)>,
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Checks `AᵀA + ρᵀρ = I` and returns `A`.
pub fn checked_loading(model: &ModelSpec) -> Result<DMatrix<f64>, SimError> {
    let a = model.orthogonal_loading();
    let rho = model.rho_matrix();
    let dev = (a.transpose() * &a + rho.transpose() * &rho - DMatrix::identity(model.d_b, model.d_b)).amax();
    if dev > 1e-12 {
        return Err(SimError::Loading(dev));
    }
    Ok(a)
}

struct PathOut {
    w: Vec<f64>,
    wperp: Vec<f64>,
    b: Vec<f64>,
    y: Vec<f64>,
    s: Vec<f64>,
    x: Vec<Vec<f64>>,
    tau: Option<f64>,
    adm: Vec<AdmissibilityPath>,
}

pub fn simulate(model: &ModelSpec, cfg: &SimulationConfig, strategies: &[&dyn Strategy]) -> Result<PathBundle, SimError> {
    model.check()?;
    cfg.check()?;
    if cfg.y0.len() != model.k {
        return Err(cfg_err("y0", format!("expected {} entries, got {}", model.k, cfg.y0.len())));
    }
    if !model.domain.contains(&cfg.y0) {
        return Err(cfg_err("y0", "initial factor outside the domain"));
    }
    if !cfg.s0.is_empty() && cfg.s0.len() != model.n {
        return Err(cfg_err("s0", format!("expected {} entries, got {}", model.n, cfg.s0.len())));
    }
    let a = checked_loading(model)?;
    let rho = model.rho_matrix();
    let retained = cfg.retained_steps();
    let dt = cfg.step();
    let outs: Vec<Result<PathOut, SimError>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| simulate_path(model, cfg, strategies, &rho, &a, &retained, dt, p))
        .collect();
    let nt = retained.len();
    let ns = strategies.len();
    let mut bundle = PathBundle {
        times: retained.iter().map(|&j| j as f64 * dt).collect(),
        dt,
        n_paths: cfg.n_paths,
        d_w: model.d_w,
        d_b: model.d_b,
        k: model.k,
        n: model.n,
        strategy_names: strategies.iter().map(|s| s.name()).collect(),
        w: Vec::with_capacity(cfg.n_paths * nt * model.d_w),
        wperp: Vec::with_capacity(cfg.n_paths * nt * model.d_b),
        b: Vec::with_capacity(cfg.n_paths * nt * model.d_b),
        y: Vec::with_capacity(cfg.n_paths * nt * model.k),
        s: Vec::with_capacity(cfg.n_paths * nt * model.n),
        x: vec![Vec::with_capacity(cfg.n_paths * nt); ns],
        exit_time: Vec::with_capacity(cfg.n_paths),
        admissibility: vec![Vec::with_capacity(cfg.n_paths); ns],
    };
    for out in outs {
        let out = out?;
        bundle.w.extend(out.w);
        bundle.wperp.extend(out.wperp);
        bundle.b.extend(out.b);
        bundle.y.extend(out.y);
        bundle.s.extend(out.s);
        for (i, x) in out.x.into_iter().enumerate() {
            bundle.x[i].extend(x);
        }
        for (i, ad) in out.adm.into_iter().enumerate() {
            bundle.admissibility[i].push(ad);
        }
        bundle.exit_time.push(out.tau);
    }
    Ok(bundle)
}

#[allow(clippy::too_many_arguments)]
fn simulate_path(
    model: &ModelSpec,
    cfg: &SimulationConfig,
    strategies: &[&dyn Strategy],
    rho: &DMatrix<f64>,
    a: &DMatrix<f64>,
    retained: &[usize],
    dt: f64,
    p: usize,
) -> Result<PathOut, SimError> {
    let (d_w, d_b, k, n) = (model.d_w, model.d_b, model.k, model.n);
    let ns = strategies.len();
    let nt = retained.len();
    let n_steps = *retained.last().unwrap();
    let mut rng = path_rng(cfg.seed, p);
    let sq = dt.sqrt();
    let mut w = DVector::zeros(d_w);
    let mut wp = DVector::zeros(d_b);
    let mut y = cfg.y0.clone();
    let mut log_s = vec![0.0; n];
    let s0: Vec<f64> = if cfg.s0.is_empty() { vec![1.0; n] } else { cfg.s0.clone() };
    let mut log_x = vec![0.0; ns];
    let mut frozen = false;
    let mut tau = None;
    let mut adm = vec![AdmissibilityPath::default(); ns];
    let mut out = PathOut {
        w: Vec::with_capacity(nt * d_w),
        wperp: Vec::with_capacity(nt * d_b),
        b: Vec::with_capacity(nt * d_b),
        y: Vec::with_capacity(nt * k),
        s: Vec::with_capacity(nt * n),
        x: vec![Vec::with_capacity(nt); ns],
        tau: None,
        adm: vec![],
    };
    let rho_t = rho.transpose();
    let a_t = a.transpose();
    let record = |w: &DVector<f64>, wp: &DVector<f64>, y: &[f64], log_s: &[f64], log_x: &[f64], out: &mut PathOut| {
        out.w.extend(w.iter());
        out.wperp.extend(wp.iter());
        let b = &rho_t * w + &a_t * wp;
        out.b.extend(b.iter());
        out.y.extend_from_slice(y);
        out.s.extend(log_s.iter().zip(&s0).map(|(l, s)| s * l.exp()));
        for (i, l) in log_x.iter().enumerate() {
            out.x[i].push(cfg.x0 * l.exp());
        }
    };
    record(&w, &wp, &y, &log_s, &log_x, &mut out);
    let mut next_keep = 1;
    let mut y_eval = y.clone();
    let mut dw = DVector::zeros(d_w);
    let mut dwp = DVector::zeros(d_b);
    for step in 0..n_steps {
        let t = step as f64 * dt;
        for v in dw.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = z * sq;
        }
        for v in dwp.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = z * sq;
        }
        if !frozen {
            y_eval.copy_from_slice(&y);
            if cfg.boundary_policy == BoundaryPolicy::FullTruncation {
                model.domain.clamp(&mut y_eval);
            }
            let mu = model.mu(&y_eval);
            let sigma = model.sigma(&y_eval);
            let alpha = model.alpha(&y_eval);
            let kappa = model.kappa(&y_eval);
            for (what, ok) in [
                ("mu", mu.iter().all(|v| v.is_finite())),
                ("sigma", sigma.iter().all(|v| v.is_finite())),
                ("alpha", alpha.iter().all(|v| v.is_finite())),
                ("kappa", kappa.iter().all(|v| v.is_finite())),
            ] {
                if !ok {
                    return Err(SimError::NonFinite { path: p, step, what: what.into() });
                }
            }
            let lambda = model::sharpe_ratio_lenient(model, &sigma, &y_eval);
            let db = &rho_t * &dw + &a_t * &dwp;
            let dy = &alpha * dt + kappa.transpose() * &db;
            let state = MarketState::new(t, &y_eval, &mu, &sigma, &lambda, &kappa, rho);
            for i in 0..n {
                let col = sigma.column(i);
                log_s[i] += (mu[i] - 0.5 * col.norm_squared()) * dt + col.dot(&dw);
            }
            for (si, strat) in strategies.iter().enumerate() {
                let pi = strat.position(&state, cfg.x0 * log_x[si].exp());
                if pi.len() != n {
                    return Err(SimError::StrategyDimension { name: strat.name(), got: pi.len(), n });
                }
                if pi.iter().any(|v| !v.is_finite()) {
                    adm[si].first_non_finite.get_or_insert(step);
                    continue;
                }
                let v = &sigma * pi;
                let drift = v.dot(&lambda);
                let qv = v.norm_squared();
                log_x[si] += drift * dt - 0.5 * qv * dt + v.dot(&dw);
                adm[si].drift_integral += drift.abs() * dt;
                adm[si].qv_integral += qv * dt;
            }
            for i in 0..k {
                y[i] += dy[i];
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(SimError::NonFinite { path: p, step, what: "Y".into() });
            }
            if !model.domain.contains(&y) {
                tau.get_or_insert(t + dt);
                match cfg.boundary_policy {
                    BoundaryPolicy::Absorb => {
                        model.domain.clamp(&mut y);
                        frozen = true;
                    }
                    BoundaryPolicy::Reflect => model.domain.reflect(&mut y),
                    BoundaryPolicy::FullTruncation => {}
                }
            }
        }
        w += &dw;
        wp += &dwp;
        if next_keep < nt && retained[next_keep] == step + 1 {
            record(&w, &wp, &y, &log_s, &log_x, &mut out);
            next_keep += 1;
        }
    }
    out.tau = tau;
    out.adm = adm;
    Ok(out)
}

/// Monte Carlo estimate and standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(v: &[f64]) -> Estimate {
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Estimate { mean, std_error: (var / n as f64).sqrt(), n }
    }

    pub fn z_score(&self, target: f64) -> f64 {
        if self.std_error == 0.0 {
            if self.mean == target {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - target) / self.std_error
        }
    }
}

/// `E[exp(∫₀ᵗ P(Z)ds) h(Z_t) 1{τ > t} | Z₀ = y]` with `dZ = b dt + a^{1/2} dβ`.
///
/// Killing applies only under [`BoundaryPolicy::Absorb`]; the other policies
/// treat domain exits as discretisation artefacts and keep the path alive.
pub fn feynman_kac_estimate(
    gen: &GeneratorCoefficients,
    domain: &Domain,
    h: &(dyn Fn(&[f64]) -> f64 + Sync),
    t: f64,
    y: &[f64],
    cfg: &SimulationConfig,
) -> Result<Estimate, SimError> {
    if !(t > 0.0) || t > cfg.horizon * (1.0 + 1e-12) {
        return Err(cfg_err("t", format!("need 0 < t ≤ horizon = {}, got {t}", cfg.horizon)));
    }
    cfg.check()?;
    let k = gen.k();
    if y.len() != k {
        return Err(cfg_err("y", format!("expected {k} entries, got {}", y.len())));
    }
    let n_steps = ((t / cfg.dt) - 1e-9).ceil().max(1.0) as usize;
    let dt = t / n_steps as f64;
    let sq = dt.sqrt();
    let values: Vec<Result<f64, SimError>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(cfg.seed, p);
            let mut z = y.to_vec();
            let mut ze = z.clone();
            let mut log_w = 0.0;
            let mut xi = DVector::zeros(k);
            for step in 0..n_steps {
                ze.copy_from_slice(&z);
                if cfg.boundary_policy == BoundaryPolicy::FullTruncation {
                    domain.clamp(&mut ze);
                }
                let (a, b, pot) = gen.all(&ze)?;
                if !pot.is_finite() || b.iter().any(|v| !v.is_finite()) || a.iter().any(|v| !v.is_finite()) {
                    return Err(SimError::NonFinite { path: p, step, what: "generator".into() });
                }
                log_w += pot * dt;
                for v in xi.iter_mut() {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    *v = g * sq;
                }
                let dz = b * dt + diffusion_root(&a) * &xi;
                for i in 0..k {
                    z[i] += dz[i];
                }
                if !domain.contains(&z) {
                    match cfg.boundary_policy {
                        BoundaryPolicy::Absorb => return Ok(0.0),
                        BoundaryPolicy::Reflect => domain.reflect(&mut z),
                        BoundaryPolicy::FullTruncation => {}
                    }
                }
            }
            ze.copy_from_slice(&z);
            domain.clamp(&mut ze);
            Ok(log_w.exp() * h(&ze))
        })
        .collect();
    let v: Vec<f64> = values.into_iter().collect::<Result<_, _>>()?;
    Ok(Estimate::from_samples(&v))
}

/// A square root `R` with `R Rᵀ = a`: elementwise for diagonal `a`,
/// Cholesky when positive definite, symmetric root otherwise.
fn diffusion_root(a: &DMatrix<f64>) -> DMatrix<f64> {
    let k = a.nrows();
    let diagonal = (0..k).all(|i| (0..k).all(|j| i == j || a[(i, j)] == 0.0));
    if diagonal {
        return DMatrix::from_fn(k, k, |i, j| if i == j { a[(i, i)].max(0.0).sqrt() } else { 0.0 });
    }
    if let Some(c) = a.clone().cholesky() {
        return c.l();
    }
    linalg::sym_sqrt_psd(a, 1e-10).unwrap_or_else(|| DMatrix::zeros(k, k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub strategy: String,
    pub max_drift_integral: f64,
    pub max_qv_integral: f64,
    pub mean_qv_integral: f64,
    /// `(path, step)` pairs where the position was not finite.
    pub non_finite: Vec<(usize, usize)>,
    pub all_finite: bool,
}

pub fn admissibility_check(bundle: &PathBundle, strategy: usize) -> AdmissibilityReport {
    let adm = &bundle.admissibility[strategy];
    let mut r = AdmissibilityReport {
        strategy: bundle.strategy_names[strategy].clone(),
        max_drift_integral: 0.0,
        max_qv_integral: 0.0,
        mean_qv_integral: 0.0,
        non_finite: vec![],
        all_finite: true,
    };
    for (p, a) in adm.iter().enumerate() {
        r.max_drift_integral = r.max_drift_integral.max(a.drift_integral);
        r.max_qv_integral = r.max_qv_integral.max(a.qv_integral);
        r.mean_qv_integral += a.qv_integral / adm.len() as f64;
        if let Some(step) = a.first_non_finite {
            r.non_finite.push((p, step));
        }
        if !(a.drift_integral.is_finite() && a.qv_integral.is_finite()) || a.first_non_finite.is_some() {
            r.all_finite = false;
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::{self, AffineSpec, Direction, SquareRootMarket};

    fn flat_model(mu: f64) -> ModelSpec {
        model::constant_model(
            vec![mu, 0.5 * mu],
            vec![vec![0.2, 0.0], vec![0.05, 0.3]],
            vec![0.0],
            vec![vec![0.4]],
            vec![vec![0.6], vec![0.0]],
        )
        .unwrap()
    }

    #[test]
    fn zero_strategy_keeps_wealth() {
        let m = flat_model(0.1);
        let mut cfg = SimulationConfig::new(0.01, 1.0, 20, 7, vec![0.0]);
        cfg.x0 = 2.5;
        let b = simulate(&m, &cfg, &[&ZeroStrategy]).unwrap();
        assert!(b.x[0].iter().all(|&x| x == 2.5));
    }

    #[test]
    fn determinism_and_b_identity() {
        let m = flat_model(0.1);
        let mut cfg = SimulationConfig::new(0.01, 0.5, 16, 42, vec![0.0]);
        cfg.record_every = 5;
        let s = ConstantStrategy(DVector::from_vec(vec![0.5, -0.2]));
        let b1 = simulate(&m, &cfg, &[&s]).unwrap();
        let b2 = simulate(&m, &cfg, &[&s]).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(b1.n_times(), 11);
        let rho = m.rho_matrix();
        let a = m.orthogonal_loading();
        for p in 0..b1.n_paths {
            for j in 0..b1.n_times() {
                let w = DVector::from_column_slice(b1.w_at(p, j));
                let wp = DVector::from_column_slice(b1.wperp_at(p, j));
                let b = rho.transpose() * w + a.transpose() * wp;
                assert_eq!(b.as_slice(), b1.b_at(p, j));
                assert!(b1.x_at(0, p, j) > 0.0);
            }
        }
        cfg.seed = 43;
        assert_ne!(simulate(&m, &cfg, &[&s]).unwrap().w, b1.w);
    }

    #[test]
    fn driftless_wealth_mean_and_brownian_covariance() {
        let m = flat_model(0.0);
        let cfg = SimulationConfig::new(0.05, 1.0, 10_000, 3, vec![0.0]);
        let s = ConstantStrategy(DVector::from_vec(vec![1.0, 0.5]));
        let b = simulate(&m, &cfg, &[&s]).unwrap();
        let last = b.n_times() - 1;
        let xs: Vec<f64> = (0..b.n_paths).map(|p| b.x_at(0, p, last)).collect();
        assert!(Estimate::from_samples(&xs).z_score(1.0).abs() < 3.0);
        // Cov(W_T, B_T) = ρ T.
        for i in 0..2 {
            let prod: Vec<f64> = (0..b.n_paths).map(|p| b.w_at(p, last)[i] * b.b_at(p, last)[0]).collect();
            let target = m.rho[i][0];
            assert!(Estimate::from_samples(&prod).z_score(target).abs() < 3.0, "component {i}");
        }
    }

    #[test]
    fn feynman_kac_trivial_and_constant_potential() {
        let gen = GeneratorCoefficients::constant(DMatrix::identity(1, 1), DVector::from_vec(vec![0.3]), 0.0);
        let cfg = SimulationConfig::new(0.01, 1.0, 500, 1, vec![0.0]);
        let d = Domain::whole_space(1);
        let e = feynman_kac_estimate(&gen, &d, &|_| 1.0, 1.0, &[0.0], &cfg).unwrap();
        assert_eq!(e.mean, 1.0);
        assert_eq!(e.std_error, 0.0);
        let gen = GeneratorCoefficients::constant(DMatrix::identity(1, 1), DVector::zeros(1), -0.4);
        let e = feynman_kac_estimate(&gen, &d, &|_| 1.0, 0.5, &[0.0], &cfg).unwrap();
        assert!((e.mean - (-0.2f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn absorb_kills_and_freezes() {
        let gen = GeneratorCoefficients::constant(DMatrix::identity(1, 1), DVector::zeros(1), 0.0);
        let mut cfg = SimulationConfig::new(0.01, 1.0, 2000, 5, vec![0.5]);
        cfg.boundary_policy = BoundaryPolicy::Absorb;
        let d = Domain::positive_orthant(1);
        let e = feynman_kac_estimate(&gen, &d, &|_| 1.0, 1.0, &[0.5], &cfg).unwrap();
        // P(τ > 1) for BM from 0.5 killed at 0 is 2Φ(0.5) − 1 ≈ 0.383 (discrete monitoring biases upward).
        assert!(e.mean > 0.3 && e.mean < 0.5, "{}", e.mean);

        let mk = SquareRootMarket {
            m: vec![vec![-1.0]],
            w: vec![0.0],
            l: vec![1.0],
            variance_scale: vec![1.0],
            sharpe_loading: vec![1.0],
            p: 0.25,
            extra_mu: vec![],
            extra_sigma: vec![],
        };
        let model = mk.model().unwrap();
        let mut cfg = SimulationConfig::new(0.01, 1.0, 50, 5, vec![0.05]);
        cfg.boundary_policy = BoundaryPolicy::Absorb;
        let b = simulate(&model, &cfg, &[&ConstantStrategy(DVector::from_vec(vec![1.0]))]).unwrap();
        let exited = (0..b.n_paths).find(|&p| b.exit_time[p].is_some()).expect("some path exits");
        let tau = b.exit_time[exited].unwrap();
        let j = b.times.iter().position(|&t| t > tau + 1e-12).unwrap();
        assert_eq!(b.y_at(exited, j), b.y_at(exited, b.n_times() - 1));
        assert_eq!(b.x_at(0, exited, j), b.x_at(0, exited, b.n_times() - 1));
    }

    #[test]
    fn reflect_stays_in_domain() {
        let mk = SquareRootMarket {
            m: vec![vec![-1.0]],
            w: vec![0.0],
            l: vec![1.0],
            variance_scale: vec![1.0],
            sharpe_loading: vec![1.0],
            p: 0.25,
            extra_mu: vec![],
            extra_sigma: vec![],
        };
        let model = mk.model().unwrap();
        let mut cfg = SimulationConfig::new(0.01, 1.0, 50, 5, vec![0.05]);
        cfg.boundary_policy = BoundaryPolicy::Reflect;
        let b = simulate(&model, &cfg, &[&ZeroStrategy]).unwrap();
        assert!(b.y.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn admissibility_flags_injected_fault() {
        let m = flat_model(0.1);
        let cfg = SimulationConfig::new(0.01, 1.0, 4, 9, vec![0.0]);
        let bad = FnStrategy {
            label: "faulty".into(),
            f: Arc::new(|s: &MarketState<'_>, _x| {
                if (s.t - 0.5).abs() < 1e-9 {
                    DVector::from_element(2, f64::INFINITY)
                } else {
                    DVector::from_element(2, 0.3)
                }
            }),
        };
        let good = ConstantStrategy(DVector::from_element(2, 0.3));
        let b = simulate(&m, &cfg, &[&good, &bad]).unwrap();
        let r = admissibility_check(&b, 0);
        assert!(r.all_finite && r.max_qv_integral > 0.0);
        let r = admissibility_check(&b, 1);
        assert!(!r.all_finite);
        assert_eq!(r.non_finite, vec![(0, 50), (1, 50), (2, 50), (3, 50)]);
        assert!(b.x[1].iter().all(|&x| x > 0.0 && x.is_finite()));
    }

    #[test]
    fn binary_and_csv_round_trip() {
        let m = flat_model(0.1);
        let mut cfg = SimulationConfig::new(0.1, 1.0, 3, 11, vec![0.0]);
        cfg.record_every = 3;
        let b = simulate(&m, &cfg, &[&ZeroStrategy, &MyopicStrategy { gamma: 2.0 }]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("paths.bin");
        b.write_binary(&path).unwrap();
        assert_eq!(PathBundle::read_binary(&path).unwrap(), b);
        let files = b.write_csv(dir.path()).unwrap();
        assert_eq!(files.len(), 8);
        let text = std::fs::read_to_string(dir.path().join("Y.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * b.n_times());
    }

    #[test]
    fn config_validation() {
        let m = flat_model(0.1);
        let mut cfg = SimulationConfig::new(2.0, 1.0, 3, 11, vec![0.0]);
        assert!(matches!(simulate(&m, &cfg, &[&ZeroStrategy]), Err(SimError::Config { .. })));
        cfg.dt = 0.1;
        cfg.n_paths = 0;
        assert!(matches!(simulate(&m, &cfg, &[&ZeroStrategy]), Err(SimError::Config { .. })));
        cfg.n_paths = 1;
        cfg.y0 = vec![0.0, 1.0];
        assert!(matches!(simulate(&m, &cfg, &[&ZeroStrategy]), Err(SimError::Config { .. })));
    }

    #[test]
    fn affine_optimal_is_finite_on_square_root_market() {
        let mk = SquareRootMarket {
            m: vec![vec![-2.0]],
            w: vec![0.08],
            l: vec![0.09],
            variance_scale: vec![1.0],
            sharpe_loading: vec![2.0],
            p: 0.25,
            extra_mu: vec![0.2],
            extra_sigma: vec![2.0],
        };
        let rp = RiskParams::new(3.0, 0.25).unwrap();
        let model = mk.model().unwrap();
        let spec: AffineSpec = mk.affine_spec(&rp, vec![0.0], 0.0);
        let sol = Arc::new(affine::solve_riccati(&spec, &rp, 1.0, Direction::Forward).unwrap());
        let strat = AffineOptimalStrategy { solution: sol, rp };
        let cfg = SimulationConfig::new(0.01, 1.0, 50, 2, vec![0.04]);
        let b = simulate(&model, &cfg, &[&strat]).unwrap();
        let r = admissibility_check(&b, 0);
        assert!(r.all_finite);
        assert!(b.x[0].iter().all(|&x| x > 0.0));
    }
}
