//! Certification of candidate value functions and performance processes:
//! finite-difference PDE residuals, distortion round trips, portfolio
//! identities and Monte Carlo (super)martingale diagnostics.
//!
//! Finite-difference steps are relative: coordinate `z` uses
//! `h = step · max(|z|, 1)`, and wealth uses `h = step · x`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::model::{self, GeneratorCoefficients, ModelError, ModelSpec, RiskParams};
use crate::sim::{Estimate, PathBundle};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("∂ₓₓV = {value} ≥ 0 at t = {t}, x = {x}, y = {y:?}: V is not strictly concave")]
    Concavity { t: f64, x: f64, y: Vec<f64>, value: f64 },
    #[error("candidate u = {value} is not positive at t = {t}, y = {y:?}")]
    Positivity { t: f64, y: Vec<f64>, value: f64 },
    #[error("non-finite evaluation at t = {t}, y = {y:?}")]
    NonFinite { t: f64, y: Vec<f64> },
    #[error("martingale test needs at least {min} paths, got {got}")]
    InsufficientSample { got: usize, min: usize },
    #[error("martingale test needs at least {min} buckets and enough retained times (got {buckets} buckets, {times} times)")]
    Buckets { buckets: usize, times: usize, min: usize },
    #[error("unknown strategy index {0}")]
    Strategy(usize),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    Central2,
    Central4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdOptions {
    pub step: f64,
    pub stencil: Stencil,
    /// Keep the per-point table in the report.
    pub keep_points: bool,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions { step: 1e-3, stencil: Stencil::Central2, keep_points: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualPoint {
    pub t: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    pub y: Vec<f64>,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub grid: String,
    pub stencil: String,
    pub step: f64,
    pub max_abs_residual: f64,
    pub mean_abs_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<ResidualPoint>>,
}

impl ResidualReport {
    fn build(grid: String, stencil: String, step: f64, points: Vec<ResidualPoint>, keep: bool) -> Self {
        let n = points.len().max(1) as f64;
        let max_abs_residual = points.iter().map(|p| p.residual.abs()).fold(0.0, f64::max);
        let mean_abs_residual = points.iter().map(|p| p.residual.abs()).sum::<f64>() / n;
        ResidualReport { grid, stencil, step, max_abs_residual, mean_abs_residual, points: keep.then_some(points) }
    }
}

/// `log(r_coarse / r_fine) / log(h_coarse / h_fine)`.
pub fn richardson_slope(r_coarse: f64, r_fine: f64, h_ratio: f64) -> f64 {
    (r_coarse / r_fine).ln() / h_ratio.ln()
}

fn scaled(step: f64, z: f64) -> f64 {
    step * z.abs().max(1.0)
}

fn check_finite(v: f64, t: f64, y: &[f64]) -> Result<f64, VerifyError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(VerifyError::NonFinite { t, y: y.to_vec() })
    }
}

/// Gradient and Hessian of `f` at `z` with per-coordinate steps `h`.
fn fd_grad_hess(
    f: &dyn Fn(&[f64]) -> f64,
    z: &[f64],
    h: &[f64],
    stencil: Stencil,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let m = z.len();
    let f0 = f(z);
    let at = |offsets: &[(usize, f64)]| {
        let mut p = z.to_vec();
        for &(i, s) in offsets {
            p[i] += s * h[i];
        }
        f(&p)
    };
    let mut g = DVector::zeros(m);
    let mut hs = DMatrix::zeros(m, m);
    for i in 0..m {
        let (p1, m1) = (at(&[(i, 1.0)]), at(&[(i, -1.0)]));
        match stencil {
            Stencil::Central2 => {
                g[i] = (p1 - m1) / (2.0 * h[i]);
                hs[(i, i)] = (p1 - 2.0 * f0 + m1) / (h[i] * h[i]);
            }
            Stencil::Central4 => {
                let (p2, m2) = (at(&[(i, 2.0)]), at(&[(i, -2.0)]));
                g[i] = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h[i]);
                hs[(i, i)] = (-p2 + 16.0 * p1 - 30.0 * f0 + 16.0 * m1 - m2) / (12.0 * h[i] * h[i]);
            }
        }
        for j in 0..i {
            let v = match stencil {
                Stencil::Central2 => {
                    (at(&[(i, 1.0), (j, 1.0)]) - at(&[(i, 1.0), (j, -1.0)]) - at(&[(i, -1.0), (j, 1.0)])
                        + at(&[(i, -1.0), (j, -1.0)]))
                        / (4.0 * h[i] * h[j])
                }
                Stencil::Central4 => {
                    let w = [(2.0, -1.0), (1.0, 8.0), (-1.0, -8.0), (-2.0, 1.0)];
                    let mut s = 0.0;
                    for &(si, wi) in &w {
                        for &(sj, wj) in &w {
                            s += wi * wj * at(&[(i, si), (j, sj)]);
                        }
                    }
                    s / (144.0 * h[i] * h[j])
                }
            };
            hs[(i, j)] = v;
            hs[(j, i)] = v;
        }
    }
    (f0, g, hs)
}

fn fd_time(f: &dyn Fn(f64) -> f64, t: f64, h: f64, stencil: Stencil) -> f64 {
    match stencil {
        Stencil::Central2 => (f(t + h) - f(t - h)) / (2.0 * h),
        Stencil::Central4 => (-f(t + 2.0 * h) + 8.0 * f(t + h) - 8.0 * f(t - h) + f(t - 2.0 * h)) / (12.0 * h),
    }
}

fn stencil_name(s: Stencil) -> String {
    match s {
        Stencil::Central2 => "central, 2nd order".into(),
        Stencil::Central4 => "central, 4th order".into(),
    }
}

/// Residual of `∂ₜV + 𝓛_yV − ½|λ∂ₓV + ρκ∂ₓ∇_yV|²/∂ₓₓV` where
/// `𝓛_y = ½tr(κᵀκ∇²_y) + αᵀ∇_y` is the factor generator.
pub fn hjb_residual(
    v: &(dyn Fn(f64, f64, &[f64]) -> f64 + Sync),
    model: &ModelSpec,
    grid: &[(f64, f64, Vec<f64>)],
    fd: FdOptions,
) -> Result<ResidualReport, VerifyError> {
    let rho = model.rho_matrix();
    let k = model.k;
    let mut points = Vec::with_capacity(grid.len());
    for (t, x, y) in grid {
        let (t, x) = (*t, *x);
        let mut z = vec![x];
        z.extend_from_slice(y);
        let mut h = vec![fd.step * x];
        h.extend(y.iter().map(|&yi| scaled(fd.step, yi)));
        let spatial = |p: &[f64]| v(t, p[0], &p[1..]);
        let (_, g, hs) = fd_grad_hess(&spatial, &z, &h, fd.stencil);
        let vt = fd_time(&|s| v(s, x, y), t, scaled(fd.step, t), fd.stencil);
        let vx = g[0];
        let vxx = hs[(0, 0)];
        if !(vxx < 0.0) {
            return Err(VerifyError::Concavity { t, x, y: y.clone(), value: vxx });
        }
        let grad_y = g.rows(1, k).into_owned();
        let hess_y = hs.view((1, 1), (k, k)).into_owned();
        let vxy = DVector::from_fn(k, |i, _| hs[(0, 1 + i)]);
        let lambda = model::sharpe_ratio(model, y)?;
        let kappa = model.kappa(y);
        let a = kappa.transpose() * &kappa;
        let alpha = model.alpha(y);
        let ly = 0.5 * a.component_mul(&hess_y).sum() + alpha.dot(&grad_y);
        let w = &lambda * vx + &rho * (&kappa * vxy);
        let r = vt + ly - 0.5 * w.norm_squared() / vxx;
        points.push(ResidualPoint { t, x: Some(x), y: y.clone(), residual: check_finite(r, t, y)? });
    }
    Ok(ResidualReport::build(format!("{} (t, x, y) points", grid.len()), stencil_name(fd.stencil), fd.step, points, fd.keep_points))
}

/// `(u, ∂ₜu, ∇u, ∇²u)` at `(t, y)`.
pub type UJet = (f64, f64, DVector<f64>, DMatrix<f64>);

/// A candidate solution of the linear PDE.
pub enum Candidate<'a> {
    /// Values only; derivatives by finite differences.
    Values(&'a (dyn Fn(f64, &[f64]) -> f64 + Sync)),
    /// Exact derivatives.
    Jet(&'a (dyn Fn(f64, &[f64]) -> UJet + Sync)),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    /// `∂ₜu + ½tr(a∇²u) + bᵀ∇u + Pu`.
    pub linear: ResidualReport,
    /// `∂ₜg + ½tr(a∇²g) + bᵀ∇g + qPg + Γp(∇g)ᵀa∇g/(2g)` for `g = u^q`.
    pub nonlinear: ResidualReport,
}

#[allow(clippy::too_many_arguments)]
fn pde_residual(
    gen: &GeneratorCoefficients,
    y: &[f64],
    value: f64,
    dt: f64,
    grad: &DVector<f64>,
    hess: &DMatrix<f64>,
    potential_factor: f64,
    quadratic: f64,
) -> Result<f64, ModelError> {
    let (a, b, p) = gen.all(y)?;
    let mut r = dt + 0.5 * a.component_mul(hess).sum() + b.dot(grad) + potential_factor * p * value;
    if quadratic != 0.0 {
        r += quadratic * (grad.transpose() * &a * grad)[(0, 0)] / (2.0 * value);
    }
    Ok(r)
}

/// Residuals of the linear PDE for `u` and of the nonlinear PDE for `g = u^q`.
pub fn distortion_roundtrip(
    u: Candidate<'_>,
    rp: &RiskParams,
    gen: &GeneratorCoefficients,
    grid: &[(f64, Vec<f64>)],
    fd: FdOptions,
) -> Result<DistortionReport, VerifyError> {
    let q = rp.q();
    let quad = rp.big_gamma() * rp.p();
    let mut lin = Vec::with_capacity(grid.len());
    let mut non = Vec::with_capacity(grid.len());
    for (t, y) in grid {
        let t = *t;
        let h: Vec<f64> = y.iter().map(|&yi| scaled(fd.step, yi)).collect();
        let ht = scaled(fd.step, t);
        let (jet_u, jet_g) = match &u {
            Candidate::Values(f) => {
                let value = f(t, y);
                if !(value > 0.0) {
                    return Err(VerifyError::Positivity { t, y: y.clone(), value });
                }
                let (uv, ug, uh) = fd_grad_hess(&|p| f(t, p), y, &h, fd.stencil);
                let ut = fd_time(&|s| f(s, y), t, ht, fd.stencil);
                let gf = |s: f64, p: &[f64]| f(s, p).powf(q);
                let (gv, gg, gh) = fd_grad_hess(&|p| gf(t, p), y, &h, fd.stencil);
                let gt = fd_time(&|s| gf(s, y), t, ht, fd.stencil);
                ((uv, ut, ug, uh), (gv, gt, gg, gh))
            }
            Candidate::Jet(f) => {
                let (uv, ut, ug, uh) = f(t, y);
                if !(uv > 0.0) {
                    return Err(VerifyError::Positivity { t, y: y.clone(), value: uv });
                }
                let c1 = q * uv.powf(q - 1.0);
                let c2 = q * (q - 1.0) * uv.powf(q - 2.0);
                let gv = uv.powf(q);
                let gt = c1 * ut;
                let gg = &ug * c1;
                let gh = &uh * c1 + &ug * ug.transpose() * c2;
                ((uv, ut, ug, uh), (gv, gt, gg, gh))
            }
        };
        let rl = pde_residual(gen, y, jet_u.0, jet_u.1, &jet_u.2, &jet_u.3, 1.0, 0.0)?;
        let rn = pde_residual(gen, y, jet_g.0, jet_g.1, &jet_g.2, &jet_g.3, q, quad)?;
        lin.push(ResidualPoint { t, x: None, y: y.clone(), residual: check_finite(rl, t, y)? });
        non.push(ResidualPoint { t, x: None, y: y.clone(), residual: check_finite(rn, t, y)? });
    }
    let (desc, st) = match u {
        Candidate::Values(_) => (stencil_name(fd.stencil), fd.step),
        Candidate::Jet(_) => ("exact derivatives".to_string(), 0.0),
    };
    let g = format!("{} (t, y) points", grid.len());
    Ok(DistortionReport {
        linear: ResidualReport::build(g.clone(), desc.clone(), st, lin, fd.keep_points),
        nonlinear: ResidualReport::build(g, desc, st, non, fd.keep_points),
    })
}

/// `‖σ(y)π − (1/γ)(λ + qρκ∇u/u)‖` for a candidate `π` and `(u, ∇u)` at `y`.
pub fn optimal_portfolio_residual(
    model: &ModelSpec,
    rp: &RiskParams,
    u: f64,
    grad_u: &DVector<f64>,
    y: &[f64],
    pi: &DVector<f64>,
) -> Result<f64, VerifyError> {
    let sigma = model.sigma(y);
    let (_, rank) = linalg::pinv(&sigma);
    if rank < model.n {
        return Err(ModelError::Singular { y: y.to_vec(), rank, n: model.n }.into());
    }
    let lambda = model::sharpe_ratio(model, y)?;
    let target = (lambda + model.rho_matrix() * (model.kappa(y) * grad_u) * (rp.q() / u)) / rp.gamma();
    Ok((sigma * pi - target).norm())
}

/// `π* = (1/γ)[(σᵀσ)⁻¹μ + q ς κ ∇u/u]` with `ς = σ⁻ρ`.
pub fn optimal_portfolio(
    model: &ModelSpec,
    rp: &RiskParams,
    u: f64,
    grad_u: &DVector<f64>,
    y: &[f64],
) -> Result<DVector<f64>, VerifyError> {
    let sigma = model.sigma(y);
    let gram = sigma.transpose() * &sigma;
    let chol = gram.cholesky().ok_or_else(|| ModelError::Singular { y: y.to_vec(), rank: 0, n: model.n })?;
    let myopic = chol.solve(&model.mu(y));
    let varsigma = linalg::pinv(&sigma).0 * model.rho_matrix();
    Ok((myopic + varsigma * model.kappa(y) * grad_u * (rp.q() / u)) / rp.gamma())
}

/// `σπ* = −(λ∂ₓV + ρκ∂ₓ∇_yV)/(x ∂ₓₓV)` from derivatives of a value function.
pub fn hjb_portfolio_exposure(model: &ModelSpec, y: &[f64], x: f64, vx: f64, vxx: f64, vxy: &DVector<f64>) -> Result<DVector<f64>, VerifyError> {
    let lambda = model::sharpe_ratio(model, y)?;
    Ok(-(lambda * vx + model.rho_matrix() * (model.kappa(y) * vxy)) / (x * vxx))
}

/// Sign-test outcome per clause of the FPP definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleBucket {
    pub t0: f64,
    pub t1: f64,
    pub mean_increment: f64,
    pub std_error: f64,
    pub z: f64,
    pub kurtosis: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    MartingaleConsistent,
    SupermartingaleConsistent,
    Inconsistent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub strategy: String,
    pub n_paths: usize,
    pub buckets: Vec<MartingaleBucket>,
    pub martingale_consistent: bool,
    pub supermartingale_consistent: bool,
    pub verdict: Verdict,
    /// Some bucket mean lies below `−3 SE`.
    pub strict_decrease: bool,
    /// Some bucket has sample kurtosis above the heavy-tail threshold.
    pub heavy_tails: bool,
}

pub const MIN_PATHS: usize = 100;
pub const MIN_BUCKETS: usize = 10;
pub const Z_THRESHOLD: f64 = 3.0;
pub const KURTOSIS_LIMIT: f64 = 1e3;

/// `U(t, x, y)` evaluated along simulated paths.
pub type FppFn<'a> = dyn Fn(f64, f64, &[f64]) -> Result<f64, String> + Sync + 'a;

/// Buckets the retained grid into `n_buckets` consecutive intervals and tests
/// the sign of the mean increment of `U_t(X_t)` on each.
pub fn martingale_test(
    bundle: &PathBundle,
    strategy: usize,
    fpp: &FppFn<'_>,
    n_buckets: usize,
) -> Result<MartingaleReport, VerifyError> {
    if strategy >= bundle.x.len() {
        return Err(VerifyError::Strategy(strategy));
    }
    if bundle.n_paths < MIN_PATHS {
        return Err(VerifyError::InsufficientSample { got: bundle.n_paths, min: MIN_PATHS });
    }
    let nt = bundle.n_times();
    if n_buckets < MIN_BUCKETS || nt < n_buckets + 1 {
        return Err(VerifyError::Buckets { buckets: n_buckets, times: nt, min: MIN_BUCKETS });
    }
    let edges: Vec<usize> = (0..=n_buckets).map(|b| (b * (nt - 1) + n_buckets / 2) / n_buckets).collect();
    // U at every edge for every path.
    let mut values = vec![0.0; bundle.n_paths * edges.len()];
    for p in 0..bundle.n_paths {
        for (e, &j) in edges.iter().enumerate() {
            let v = fpp(bundle.times[j], bundle.x_at(strategy, p, j), bundle.y_at(p, j)).map_err(VerifyError::Evaluation)?;
            if !v.is_finite() {
                return Err(VerifyError::NonFinite { t: bundle.times[j], y: bundle.y_at(p, j).to_vec() });
            }
            values[p * edges.len() + e] = v;
        }
    }
    let mut buckets = Vec::with_capacity(n_buckets);
    for b in 0..n_buckets {
        let inc: Vec<f64> =
            (0..bundle.n_paths).map(|p| values[p * edges.len() + b + 1] - values[p * edges.len() + b]).collect();
        let est = Estimate::from_samples(&inc);
        let m2 = inc.iter().map(|v| (v - est.mean).powi(2)).sum::<f64>() / inc.len() as f64;
        let m4 = inc.iter().map(|v| (v - est.mean).powi(4)).sum::<f64>() / inc.len() as f64;
        let kurtosis = if m2 > 0.0 { m4 / (m2 * m2) } else { 0.0 };
        buckets.push(MartingaleBucket {
            t0: bundle.times[edges[b]],
            t1: bundle.times[edges[b + 1]],
            mean_increment: est.mean,
            std_error: est.std_error,
            z: est.z_score(0.0),
            kurtosis,
        });
    }
    let martingale_consistent = buckets.iter().all(|b| b.z.abs() <= Z_THRESHOLD);
    let supermartingale_consistent = buckets.iter().all(|b| b.z <= Z_THRESHOLD);
    let verdict = if martingale_consistent {
        Verdict::MartingaleConsistent
    } else if supermartingale_consistent {
        Verdict::SupermartingaleConsistent
    } else {
        Verdict::Inconsistent
    };
    Ok(MartingaleReport {
        strategy: bundle.strategy_names[strategy].clone(),
        n_paths: bundle.n_paths,
        strict_decrease: buckets.iter().any(|b| b.z < -Z_THRESHOLD),
        heavy_tails: buckets.iter().any(|b| b.kurtosis > KURTOSIS_LIMIT),
        buckets,
        martingale_consistent,
        supermartingale_consistent,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::{self, Direction, SquareRootMarket};
    use crate::sim::{self, SimulationConfig, ZeroStrategy};

    fn market() -> SquareRootMarket {
        SquareRootMarket {
            m: vec![vec![-1.5, 0.0], vec![0.0, -1.0]],
            w: vec![0.1, 0.06],
            l: vec![0.09, 0.04],
            variance_scale: vec![1.0, 0.5],
            sharpe_loading: vec![2.0, 1.0],
            p: 0.25,
            extra_mu: vec![0.1],
            extra_sigma: vec![0.5],
        }
    }

    fn affine_v(rp: RiskParams) -> (ModelSpec, affine::RiccatiSolution) {
        let mk = market();
        let spec = mk.affine_spec(&rp, vec![0.3, -0.2], 0.1);
        (mk.model().unwrap(), affine::solve_riccati(&spec, &rp, 1.0, Direction::Forward).unwrap())
    }

    fn grid3() -> Vec<(f64, f64, Vec<f64>)> {
        let mut g = Vec::new();
        for t in [0.2, 0.5, 0.8] {
            for x in [0.7, 1.3] {
                for y in [[0.05, 0.1], [0.2, 0.08]] {
                    g.push((t, x, y.to_vec()));
                }
            }
        }
        g
    }

    #[test]
    fn hjb_residual_of_affine_value_function() {
        let rp = RiskParams::new(3.0, 0.25).unwrap();
        let (model, sol) = affine_v(rp);
        let v = |t: f64, x: f64, y: &[f64]| affine::evaluate_fpp(&sol, &rp, t, x, y).unwrap();
        let r = hjb_residual(&v, &model, &grid3(), FdOptions::default()).unwrap();
        assert!(r.max_abs_residual < 1e-4, "{}", r.max_abs_residual);
        let coarse = hjb_residual(&v, &model, &grid3(), FdOptions { step: 1e-2, ..FdOptions::default() }).unwrap();
        let slope = richardson_slope(coarse.max_abs_residual, r.max_abs_residual, 10.0);
        assert!(slope >= 1.8, "slope {slope}");
    }

    #[test]
    fn hjb_log_utility_is_negative_control() {
        let rp = RiskParams::new(3.0, 0.25).unwrap();
        let (model, _) = affine_v(rp);
        let v = |_t: f64, x: f64, _y: &[f64]| x.ln();
        let r = hjb_residual(&v, &model, &grid3(), FdOptions::default()).unwrap();
        assert!(r.max_abs_residual > 1e-3);
    }

    #[test]
    fn hjb_no_opportunity_is_exact() {
        let model = model::constant_model(vec![0.0], vec![vec![0.3]], vec![0.1], vec![vec![0.5]], vec![vec![0.4]]).unwrap();
        let rp = RiskParams::new(2.0, 0.16).unwrap();
        let v = |_t: f64, x: f64, _y: &[f64]| rp.power_utility(x);
        let grid = vec![(0.3, 1.0, vec![0.2]), (0.7, 2.0, vec![-1.0])];
        let r = hjb_residual(&v, &model, &grid, FdOptions::default()).unwrap();
        assert_eq!(r.max_abs_residual, 0.0);
    }

    #[test]
    fn hjb_concavity_violation() {
        let model = model::constant_model(vec![0.0], vec![vec![0.3]], vec![0.1], vec![vec![0.5]], vec![vec![0.4]]).unwrap();
        let v = |_t: f64, x: f64, _y: &[f64]| x * x;
        assert!(matches!(
            hjb_residual(&v, &model, &[(0.5, 1.0, vec![0.0])], FdOptions::default()),
            Err(VerifyError::Concavity { .. })
        ));
    }

    fn distortion_grid() -> Vec<(f64, Vec<f64>)> {
        let mut g = Vec::new();
        for t in [0.25, 0.5, 0.75] {
            for y in [[0.05, 0.1], [0.15, 0.2]] {
                g.push((t, y.to_vec()));
            }
        }
        g
    }

    #[test]
    fn distortion_of_affine_u() {
        let rp = RiskParams::new(3.0, 0.25).unwrap();
        let (model, sol) = affine_v(rp);
        let gen = model::generator_coefficients(&model, &rp).unwrap();
        let u = |t: f64, y: &[f64]| affine::evaluate_u_affine(&sol, t, y).unwrap();
        let r = distortion_roundtrip(Candidate::Values(&u), &rp, &gen, &distortion_grid(), FdOptions::default()).unwrap();
        assert!(r.linear.max_abs_residual < 1e-4 && r.nonlinear.max_abs_residual < 1e-4, "{r:?}");
    }

    #[test]
    fn distortion_collapses_when_p_is_zero() {
        let rp = RiskParams::new(3.0, 0.0).unwrap();
        let gen = GeneratorCoefficients::constant(DMatrix::identity(1, 1) * 0.3, DVector::from_vec(vec![0.1]), -0.2);
        let u = |t: f64, y: &[f64]| (0.4 * y[0] - 0.2 * t).exp() + 0.5;
        let grid = vec![(0.5, vec![0.1]), (0.9, vec![-0.4])];
        let r = distortion_roundtrip(Candidate::Values(&u), &rp, &gen, &grid, FdOptions::default()).unwrap();
        assert_eq!(r.linear.max_abs_residual, r.nonlinear.max_abs_residual);
        assert_eq!(r.linear.mean_abs_residual, r.nonlinear.mean_abs_residual);
    }

    #[test]
    fn distortion_rejects_non_positive() {
        let rp = RiskParams::new(3.0, 0.0).unwrap();
        let gen = GeneratorCoefficients::constant(DMatrix::identity(1, 1), DVector::zeros(1), 0.0);
        let u = |_t: f64, y: &[f64]| y[0];
        assert!(matches!(
            distortion_roundtrip(Candidate::Values(&u), &rp, &gen, &[(0.5, vec![-1.0])], FdOptions::default()),
            Err(VerifyError::Positivity { .. })
        ));
    }

    #[test]
    fn fourth_order_stencil_beats_second_order() {
        let rp = RiskParams::new(3.0, 0.25).unwrap();
        let (model, sol) = affine_v(rp);
        let gen = model::generator_coefficients(&model, &rp).unwrap();
        let u = |t: f64, y: &[f64]| affine::evaluate_u_affine(&sol, t, y).unwrap();
        let two = distortion_roundtrip(Candidate::Values(&u), &rp, &gen, &distortion_grid(), FdOptions { step: 1e-2, ..FdOptions::default() }).unwrap();
        let four = distortion_roundtrip(
            Candidate::Values(&u),
            &rp,
            &gen,
            &distortion_grid(),
            FdOptions { step: 1e-2, stencil: Stencil::Central4, keep_points: true },
        )
        .unwrap();
        assert!(four.linear.max_abs_residual < 0.1 * two.linear.max_abs_residual);
        assert_eq!(four.linear.points.as_ref().unwrap().len(), 6);
    }

    #[test]
    fn portfolio_identities() {
        let rp = RiskParams::new(3.0, 0.25).unwrap();
        let (model, sol) = affine_v(rp);
        let y = [0.1, 0.2];
        let t = 0.4;
        let u = affine::evaluate_u_affine(&sol, t, &y).unwrap();
        let grad = sol.phi(t) * u;
        let pi = affine::optimal_portfolio_affine(&sol, &model, &rp, t, &y).unwrap();
        assert!(optimal_portfolio_residual(&model, &rp, u, &grad, &y, &pi).unwrap() < 1e-10);
        let pi2 = optimal_portfolio(&model, &rp, u, &grad, &y).unwrap();
        assert!((pi - &pi2).amax() < 1e-12);
        // Dropping the hedging term leaves (q/γ)‖ρκΦ‖.
        let gamma = rp.gamma();
        let myopic = (model.sigma(&y).transpose() * model.sigma(&y)).cholesky().unwrap().solve(&model.mu(&y)) / gamma;
        let expected = rp.q() / gamma * (model.rho_matrix() * model.kappa(&y) * sol.phi(t)).norm();
        let r = optimal_portfolio_residual(&model, &rp, u, &grad, &y, &myopic).unwrap();
        assert!((r - expected).abs() < 1e-12 && r > 0.0);
    }

    #[test]
    fn martingale_guards() {
        let mk = market();
        let model = mk.model().unwrap();
        let mut cfg = SimulationConfig::new(0.01, 1.0, 50, 1, vec![0.1, 0.1]);
        let b = sim::simulate(&model, &cfg, &[&ZeroStrategy]).unwrap();
        let f = |_t: f64, x: f64, _y: &[f64]| Ok(x);
        assert!(matches!(martingale_test(&b, 0, &f, 10), Err(VerifyError::InsufficientSample { .. })));
        cfg.n_paths = 100;
        cfg.record_every = 50;
        let b = sim::simulate(&model, &cfg, &[&ZeroStrategy]).unwrap();
        assert!(matches!(martingale_test(&b, 0, &f, 10), Err(VerifyError::Buckets { .. })));
        assert!(matches!(martingale_test(&b, 3, &f, 10), Err(VerifyError::Strategy(3))));
    }

    #[test]
    fn zero_strategy_wealth_is_a_martingale() {
        let mk = market();
        let model = mk.model().unwrap();
        let mut cfg = SimulationConfig::new(0.01, 1.0, 200, 3, vec![0.1, 0.1]);
        cfg.record_every = 5;
        let b = sim::simulate(&model, &cfg, &[&ZeroStrategy]).unwrap();
        let f = |_t: f64, x: f64, _y: &[f64]| Ok(x);
        let r = martingale_test(&b, 0, &f, 10).unwrap();
        assert_eq!(r.verdict, Verdict::MartingaleConsistent);
        assert!(r.buckets.iter().all(|b| b.mean_increment == 0.0));
    }
}
