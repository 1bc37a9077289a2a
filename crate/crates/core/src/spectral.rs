//! Finite atomic spectral measures and positive eigenfunction selections.
//!
//! A pair `(ν, Ψ)` with `ν = Σ wᵢ δ_{ζᵢ}` and `𝓛ψᵢ = ζᵢψᵢ`, `ψᵢ(y₀) = 1`,
//! determines `u(t, y) = Σ wᵢ e^{−ζᵢt} ψᵢ(y)`, a positive solution of
//! `∂ₜu + 𝓛u = 0` forward in time. This module evaluates such mixtures,
//! shoots one-factor eigenfunctions, and recovers `(ν, Ψ)` from sampled
//! `u` by discrete Laplace inversion.

use std::cell::RefCell;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::model::{GeneratorCoefficients, ModelError, RiskParams};
use crate::ode::{self, Control, OdeError, OdeOptions};

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("invalid spectral measure: {0}")]
    InvalidMeasure(String),
    #[error("invalid eigenfunction selection: {0}")]
    InvalidSelection(String),
    #[error("ψ_{atom}(y₀) = {value}, expected 1")]
    Normalization { atom: usize, value: f64 },
    #[error("point {0:?} is not covered by the eigenfunction representation")]
    OutsideRepresentation(Vec<f64>),
    #[error("invalid samples: {0}")]
    Samples(String),
    #[error("ill-conditioned Hankel system: condition number {condition:.3e} exceeds {limit:.0e}")]
    Conditioning { condition: f64, limit: f64 },
    #[error("data not representable by {m} positive atoms: {reason}")]
    NonRepresentable { m: usize, reason: String },
    #[error("inconsistent data at y = {y:?}: residual {residual:.3e} above tolerance {tol:.1e}")]
    Inconsistent { y: Vec<f64>, residual: f64, tol: f64 },
    #[error("x must be positive, got {0}")]
    Wealth(f64),
    #[error("radial diagnostic needs k ≥ 2 and r_max > 1 (got k = {k}, r_max = {r_max})")]
    Radial { k: usize, r_max: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("integration failed: {0}")]
    Integration(#[from] OdeError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub zeta: f64,
    pub weight: f64,
}

/// `ν = Σ wᵢ δ_{ζᵢ}` with atoms sorted by strictly increasing `ζ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMeasure")]
pub struct SpectralMeasure {
    atoms: Vec<Atom>,
    y0: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMeasure {
    atoms: Vec<Atom>,
    y0: Vec<f64>,
}

impl TryFrom<RawMeasure> for SpectralMeasure {
    type Error = SpectralError;
    fn try_from(raw: RawMeasure) -> Result<Self, Self::Error> {
        SpectralMeasure::new(raw.atoms, raw.y0)
    }
}

impl SpectralMeasure {
    pub fn new(mut atoms: Vec<Atom>, y0: Vec<f64>) -> Result<Self, SpectralError> {
        if atoms.is_empty() {
            return Err(SpectralError::InvalidMeasure("no atoms".into()));
        }
        if let Some(a) = atoms.iter().find(|a| !(a.weight > 0.0 && a.weight.is_finite() && a.zeta.is_finite())) {
            return Err(SpectralError::InvalidMeasure(format!("atom {a:?} needs finite ζ and positive finite weight")));
        }
        atoms.sort_by(|a, b| a.zeta.total_cmp(&b.zeta));
        if atoms.windows(2).any(|w| w[0].zeta == w[1].zeta) {
            return Err(SpectralError::InvalidMeasure("repeated ζ".into()));
        }
        Ok(SpectralMeasure { atoms, y0 })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn y0(&self) -> &[f64] {
        &self.y0
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, SpectralError> {
        let atoms = self.atoms.iter().map(|a| Atom { zeta: a.zeta, weight: a.weight * factor }).collect();
        SpectralMeasure::new(atoms, self.y0.clone())
    }

    /// `Σ wᵢ e^{−ζᵢ t}`, the sample series at `y₀`.
    pub fn laplace(&self, t: f64) -> f64 {
        self.atoms.iter().map(|a| a.weight * (-a.zeta * t).exp()).sum()
    }
}

/// One positive eigenfunction, normalised at the selection's `y₀`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Eigenfunction {
    /// `ψ ≡ 1`.
    Constant,
    /// `ψ(y) = exp(sᵀ(y − y₀))`.
    Exponential { slope: Vec<f64> },
    /// One-factor samples with derivatives, cubic Hermite in between.
    Sampled1d { y: Vec<f64>, psi: Vec<f64>, dpsi: Vec<f64> },
    /// Values at isolated points (exact lookup).
    PointTable { points: Vec<Vec<f64>>, values: Vec<f64> },
}

/// Value, gradient and Hessian of an eigenfunction at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl Eigenfunction {
    pub fn eval(&self, y0: &[f64], y: &[f64]) -> Result<f64, SpectralError> {
        match self {
            Eigenfunction::Constant => Ok(1.0),
            Eigenfunction::Exponential { slope } => {
                if slope.len() != y.len() || y0.len() != y.len() {
                    return Err(SpectralError::OutsideRepresentation(y.to_vec()));
                }
                Ok(slope.iter().zip(y).zip(y0).map(|((s, a), b)| s * (a - b)).sum::<f64>().exp())
            }
            Eigenfunction::Sampled1d { y: grid, psi, dpsi } => {
                let x = match y {
                    [x] => *x,
                    _ => return Err(SpectralError::OutsideRepresentation(y.to_vec())),
                };
                let n = grid.len();
                if n < 2 || x < grid[0] || x > grid[n - 1] {
                    return Err(SpectralError::OutsideRepresentation(y.to_vec()));
                }
                let i = grid.partition_point(|&g| g <= x).clamp(1, n - 1) - 1;
                let h = grid[i + 1] - grid[i];
                let s = (x - grid[i]) / h;
                let (s2, s3) = (s * s, s * s * s);
                Ok((2.0 * s3 - 3.0 * s2 + 1.0) * psi[i]
                    + (s3 - 2.0 * s2 + s) * h * dpsi[i]
                    + (-2.0 * s3 + 3.0 * s2) * psi[i + 1]
                    + (s3 - s2) * h * dpsi[i + 1])
            }
            Eigenfunction::PointTable { points, values } => points
                .iter()
                .position(|p| p.len() == y.len() && p.iter().zip(y).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs())))
                .map(|i| values[i])
                .ok_or_else(|| SpectralError::OutsideRepresentation(y.to_vec())),
        }
    }

    /// Exact derivatives when the family has them in closed form.
    pub fn jet(&self, y0: &[f64], y: &[f64]) -> Option<Jet> {
        let k = y.len();
        match self {
            Eigenfunction::Constant => Some(Jet { value: 1.0, grad: DVector::zeros(k), hess: DMatrix::zeros(k, k) }),
            Eigenfunction::Exponential { slope } => {
                let value = self.eval(y0, y).ok()?;
                let s = DVector::from_column_slice(slope);
                Some(Jet { value, grad: &s * value, hess: &s * s.transpose() * value })
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenfunctionSelection {
    pub y0: Vec<f64>,
    pub functions: Vec<Eigenfunction>,
}

/// Tolerance on `ψᵢ(y₀) = 1`.
pub const NORMALIZATION_TOL: f64 = 1e-10;

impl EigenfunctionSelection {
    pub fn new(y0: Vec<f64>, functions: Vec<Eigenfunction>) -> Result<Self, SpectralError> {
        let sel = EigenfunctionSelection { y0, functions };
        for (i, f) in sel.functions.iter().enumerate() {
            let v = f.eval(&sel.y0, &sel.y0)?;
            if (v - 1.0).abs() > NORMALIZATION_TOL {
                return Err(SpectralError::Normalization { atom: i, value: v });
            }
        }
        Ok(sel)
    }

    fn check_against(&self, nu: &SpectralMeasure) -> Result<(), SpectralError> {
        if self.functions.len() != nu.atoms.len() {
            return Err(SpectralError::InvalidSelection(format!(
                "{} eigenfunctions for {} atoms",
                self.functions.len(),
                nu.atoms.len()
            )));
        }
        Ok(())
    }

    /// Largest `|(𝓛 − ζᵢ)ψᵢ|` over `grid` and the smallest `ψᵢ` seen.
    /// Closed-form families use exact derivatives, others central differences with step `h`.
    pub fn eigen_residuals(
        &self,
        nu: &SpectralMeasure,
        gen: &GeneratorCoefficients,
        grid: &[Vec<f64>],
        h: f64,
    ) -> Result<(f64, f64), SpectralError> {
        self.check_against(nu)?;
        let mut worst = 0.0f64;
        let mut min_psi = f64::INFINITY;
        for (f, atom) in self.functions.iter().zip(&nu.atoms) {
            for y in grid {
                let jet = match f.jet(&self.y0, y) {
                    Some(j) => j,
                    None => fd_jet(|z| f.eval(&self.y0, z), y, h)?,
                };
                min_psi = min_psi.min(jet.value);
                let r = gen.apply(y, jet.value, &jet.grad, &jet.hess)? - atom.zeta * jet.value;
                worst = worst.max(r.abs());
            }
        }
        Ok((worst, min_psi))
    }
}

fn fd_jet(f: impl Fn(&[f64]) -> Result<f64, SpectralError>, y: &[f64], h: f64) -> Result<Jet, SpectralError> {
    let k = y.len();
    let value = f(y)?;
    let mut grad = DVector::zeros(k);
    let mut hess = DMatrix::zeros(k, k);
    let mut p = y.to_vec();
    for i in 0..k {
        p[i] = y[i] + h;
        let fp = f(&p)?;
        p[i] = y[i] - h;
        let fm = f(&p)?;
        p[i] = y[i];
        grad[i] = (fp - fm) / (2.0 * h);
        hess[(i, i)] = (fp - 2.0 * value + fm) / (h * h);
        for j in 0..i {
            let mut q = y.to_vec();
            let mut corner = |si: f64, sj: f64| {
                q[i] = y[i] + si * h;
                q[j] = y[j] + sj * h;
                f(&q)
            };
            let v = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(Jet { value, grad, hess })
}

/// `Σ wᵢ e^{−ζᵢt} ψᵢ(y)`.
pub fn widder_evaluate(nu: &SpectralMeasure, sel: &EigenfunctionSelection, t: f64, y: &[f64]) -> Result<f64, SpectralError> {
    sel.check_against(nu)?;
    let mut s = 0.0;
    for (a, f) in nu.atoms.iter().zip(&sel.functions) {
        s += a.weight * (-a.zeta * t).exp() * f.eval(&sel.y0, y)?;
    }
    Ok(s)
}

/// Exact `(u, ∂ₜu, ∇u, ∇²u)` when every eigenfunction has a closed form.
pub fn widder_jet(nu: &SpectralMeasure, sel: &EigenfunctionSelection, t: f64, y: &[f64]) -> Option<(f64, f64, DVector<f64>, DMatrix<f64>)> {
    sel.check_against(nu).ok()?;
    let k = y.len();
    let (mut u, mut ut) = (0.0, 0.0);
    let mut g = DVector::zeros(k);
    let mut hs = DMatrix::zeros(k, k);
    for (a, f) in nu.atoms.iter().zip(&sel.functions) {
        let j = f.jet(&sel.y0, y)?;
        let c = a.weight * (-a.zeta * t).exp();
        u += c * j.value;
        ut -= a.zeta * c * j.value;
        g += j.grad * c;
        hs += j.hess * c;
    }
    Some((u, ut, g, hs))
}

/// `γ^γ x^{1−γ}/(1−γ) · u(t, y)^q` with `u` from [`widder_evaluate`].
pub fn fpp_from_measure(
    nu: &SpectralMeasure,
    sel: &EigenfunctionSelection,
    rp: &RiskParams,
    t: f64,
    x: f64,
    y: &[f64],
) -> Result<f64, SpectralError> {
    if !(x > 0.0) {
        return Err(SpectralError::Wealth(x));
    }
    Ok(rp.power_utility(x) * widder_evaluate(nu, sel, t, y)?.powf(rp.q()))
}

/// Shooting solution of `½aψ'' + bψ' + (P − ζ)ψ = 0` with `ψ(y₀)=1, ψ'(y₀)=s`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Eigenfunction1d {
    pub y0: f64,
    pub zeta: f64,
    pub slope: f64,
    pub grid: Vec<f64>,
    pub psi: Vec<f64>,
    pub dpsi: Vec<f64>,
    /// Estimated location of the first sign change moving away from `y₀`.
    pub first_sign_change: Option<f64>,
}

impl Eigenfunction1d {
    pub fn is_positive(&self) -> bool {
        self.first_sign_change.is_none() && self.psi.iter().all(|&v| v > 0.0)
    }

    pub fn to_eigenfunction(&self) -> Eigenfunction {
        Eigenfunction::Sampled1d { y: self.grid.clone(), psi: self.psi.clone(), dpsi: self.dpsi.clone() }
    }
}

pub fn solve_eigenfunction_1d(
    gen: &GeneratorCoefficients,
    zeta: f64,
    y0: f64,
    slope: f64,
    grid: &[f64],
) -> Result<Eigenfunction1d, SpectralError> {
    if gen.k() != 1 {
        return Err(SpectralError::InvalidSelection(format!("one-factor generator required, got k = {}", gen.k())));
    }
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SpectralError::Samples("grid must be strictly increasing".into()));
    }
    let failure: RefCell<Option<ModelError>> = RefCell::new(None);
    let rhs = |y: f64, s: &[f64], d: &mut [f64]| {
        let coef = (|| -> Result<(f64, f64, f64), ModelError> {
            let (a, b, p) = gen.all(&[y])?;
            Ok((a[(0, 0)], b[0], p))
        })();
        match coef {
            Ok((a, b, p)) if a > 0.0 => {
                d[0] = s[1];
                d[1] = -2.0 * (b * s[1] + (p - zeta) * s[0]) / a;
            }
            Ok((a, _, _)) => {
                failure.borrow_mut().get_or_insert(ModelError::InvalidField {
                    field: "a".into(),
                    reason: format!("a({y}) = {a} is not positive"),
                });
                d[0] = f64::NAN;
                d[1] = f64::NAN;
            }
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                d[0] = f64::NAN;
                d[1] = f64::NAN;
            }
        }
    };
    let opts = OdeOptions { rtol: 1e-12, atol: 1e-14, ..OdeOptions::default() };
    let n = grid.len();
    let mut psi = vec![0.0; n];
    let mut dpsi = vec![0.0; n];
    let split = grid.partition_point(|&g| g < y0);
    let mut first_sign_change: Option<f64> = None;
    let mut note = |a: f64, va: f64, b: f64, vb: f64| {
        if first_sign_change.is_none() && va > 0.0 && vb <= 0.0 {
            let z = a + (b - a) * va / (va - vb);
            first_sign_change = Some(z);
        }
    };
    // Right of y₀, ascending; then left, descending.
    for indices in [(split..n).collect::<Vec<_>>(), (0..split).rev().collect()] {
        let (mut t, mut state) = (y0, vec![1.0, slope]);
        for i in indices {
            let r = ode::integrate(&rhs, t, &state, grid[i], &opts, |_, _| Control::Continue);
            if let Some(e) = failure.borrow_mut().take() {
                return Err(e.into());
            }
            let (_, s) = r?;
            note(t, state[0], grid[i], s[0]);
            psi[i] = s[0];
            dpsi[i] = s[1];
            t = grid[i];
            state = s;
        }
    }
    Ok(Eigenfunction1d { y0, zeta, slope, grid: grid.to_vec(), psi, dpsi, first_sign_change })
}

/// Result of fitting `u(t) ≈ Σ wᵢ e^{−ζᵢt}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LaplaceFit {
    pub atoms: Vec<Atom>,
    pub max_residual: f64,
    /// `s₁/s_m` of the Hankel matrix built from the samples.
    pub hankel_condition: f64,
    pub refinement_iterations: usize,
}

impl LaplaceFit {
    pub fn into_measure(self, y0: Vec<f64>) -> Result<SpectralMeasure, SpectralError> {
        SpectralMeasure::new(self.atoms, y0)
    }
}

/// Hankel condition number above which inversion is refused.
pub const HANKEL_CONDITION_LIMIT: f64 = 1e12;
/// Relative singular value below which the signal has fewer than `m` modes.
pub const HANKEL_RANK_CUTOFF: f64 = 1e-14;

fn check_uniform(samples: &[(f64, f64)]) -> Result<f64, SpectralError> {
    let n = samples.len();
    let dt = (samples[n - 1].0 - samples[0].0) / (n - 1) as f64;
    if !(dt > 0.0) {
        return Err(SpectralError::Samples("times must be increasing".into()));
    }
    for (j, w) in samples.windows(2).enumerate() {
        if ((w[1].0 - w[0].0) - dt).abs() > 1e-9 * dt {
            return Err(SpectralError::Samples(format!("non-uniform spacing at index {j}")));
        }
    }
    if let Some((t, u)) = samples.iter().find(|(_, u)| !(*u > 0.0 && u.is_finite())) {
        return Err(SpectralError::Samples(format!("sample u({t}) = {u} is not positive")));
    }
    Ok(dt)
}

/// Exponential-sum fit by shift-invariant linear prediction on the Hankel
/// matrix of the samples, then damped Gauss–Newton refinement that keeps
/// every weight positive.
pub fn invert_laplace_discrete(samples: &[(f64, f64)], m: usize) -> Result<LaplaceFit, SpectralError> {
    let n = samples.len();
    if m == 0 {
        return Err(SpectralError::Samples("need m ≥ 1".into()));
    }
    if n < 2 * m + 2 {
        return Err(SpectralError::Samples(format!("need at least {} samples for m = {m}, got {n}", 2 * m + 2)));
    }
    let dt = check_uniform(samples)?;
    let u: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let cols = n / 2 + 1;
    let rows = n - cols + 1;
    let hankel = DMatrix::from_fn(rows, cols, |i, j| u[i + j]);
    let svd = linalg::svd(&hankel);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s1 = svd.singular_values[order[0]];
    let sm = svd.singular_values[order[m - 1]];
    if sm < HANKEL_RANK_CUTOFF * s1 {
        return Err(SpectralError::NonRepresentable {
            m,
            reason: format!("Hankel matrix has fewer than {m} significant singular values (s_m/s_1 = {:.2e}); m too large", sm / s1),
        });
    }
    let condition = s1 / sm;
    if condition > HANKEL_CONDITION_LIMIT {
        return Err(SpectralError::Conditioning { condition, limit: HANKEL_CONDITION_LIMIT });
    }
    let vt = svd.v_t.expect("v_t requested");
    let v = DMatrix::from_fn(cols, m, |i, j| vt[(order[j], i)]);
    let v1 = v.rows(0, cols - 1).into_owned();
    let v2 = v.rows(1, cols - 1).into_owned();
    let pencil = linalg::pinv(&v1).0 * v2;
    let mut zetas = Vec::with_capacity(m);
    for z in pencil.complex_eigenvalues().iter() {
        if z.im.abs() > 1e-9 * z.norm() {
            return Err(SpectralError::NonRepresentable { m, reason: format!("oscillatory mode z = {z}") });
        }
        if !(z.re > 0.0) {
            return Err(SpectralError::NonRepresentable { m, reason: format!("non-positive mode z = {}", z.re) });
        }
        zetas.push(-z.re.ln() / dt);
    }
    zetas.sort_by(|a, b| a.total_cmp(b));
    let t: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let ud = DVector::from_vec(u);
    let weights = fit_weights(&t, &zetas, &ud);
    if let Some(i) = weights.iter().position(|&w| !(w > 0.0)) {
        return Err(SpectralError::NonRepresentable {
            m,
            reason: format!("fitted weight {:.3e} at ζ = {:.6} is not positive", weights[i], zetas[i]),
        });
    }
    let (zetas, weights, iterations) = refine(&t, &ud, zetas, weights.iter().cloned().collect());
    let mut atoms: Vec<Atom> = zetas.iter().zip(&weights).map(|(&zeta, &weight)| Atom { zeta, weight }).collect();
    atoms.sort_by(|a, b| a.zeta.total_cmp(&b.zeta));
    if atoms.windows(2).any(|w| w[0].zeta == w[1].zeta) {
        return Err(SpectralError::NonRepresentable { m, reason: "coincident exponents".into() });
    }
    let max_residual = t
        .iter()
        .zip(ud.iter())
        .map(|(&tj, &uj)| (atoms.iter().map(|a| a.weight * (-a.zeta * tj).exp()).sum::<f64>() - uj).abs())
        .fold(0.0, f64::max);
    Ok(LaplaceFit { atoms, max_residual, hankel_condition: condition, refinement_iterations: iterations })
}

fn exp_matrix(t: &[f64], zetas: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(t.len(), zetas.len(), |j, i| (-zetas[i] * t[j]).exp())
}

fn fit_weights(t: &[f64], zetas: &[f64], u: &DVector<f64>) -> DVector<f64> {
    linalg::lstsq(&exp_matrix(t, zetas), u)
}

fn refine(t: &[f64], u: &DVector<f64>, mut zetas: Vec<f64>, mut weights: Vec<f64>) -> (Vec<f64>, Vec<f64>, usize) {
    let m = zetas.len();
    let nt = t.len();
    let residual = |z: &[f64], w: &[f64]| -> DVector<f64> {
        DVector::from_fn(nt, |j, _| z.iter().zip(w).map(|(zi, wi)| wi * (-zi * t[j]).exp()).sum::<f64>() - u[j])
    };
    let mut r = residual(&zetas, &weights);
    let mut cost = r.norm_squared();
    let mut damping: f64 = 1e-6;
    let mut iterations = 0;
    for _ in 0..200 {
        iterations += 1;
        let mut jac = DMatrix::zeros(nt + 2 * m, 2 * m);
        for j in 0..nt {
            for i in 0..m {
                let e = (-zetas[i] * t[j]).exp();
                jac[(j, i)] = -t[j] * weights[i] * e;
                jac[(j, m + i)] = e;
            }
        }
        let scale: Vec<f64> = (0..2 * m).map(|c| jac.column(c).rows(0, nt).norm().max(1e-300)).collect();
        let mut accepted = false;
        let mut step_size = 0.0;
        for _ in 0..30 {
            let mut a = jac.clone();
            let mut rhs = DVector::zeros(nt + 2 * m);
            rhs.rows_mut(0, nt).copy_from(&(-&r));
            for c in 0..2 * m {
                for rr in nt..nt + 2 * m {
                    a[(rr, c)] = 0.0;
                }
                a[(nt + c, c)] = damping.sqrt() * scale[c];
            }
            let delta = linalg::lstsq(&a, &rhs);
            let z_new: Vec<f64> = (0..m).map(|i| zetas[i] + delta[i]).collect();
            let w_new: Vec<f64> = (0..m).map(|i| weights[i] + delta[m + i]).collect();
            if w_new.iter().all(|&w| w > 0.0) {
                let r_new = residual(&z_new, &w_new);
                let c_new = r_new.norm_squared();
                if c_new <= cost {
                    step_size = (0..2 * m).map(|c| (delta[c] * scale[c]).abs()).fold(0.0, f64::max);
                    zetas = z_new;
                    weights = w_new;
                    r = r_new;
                    cost = c_new;
                    damping = (damping * 0.1).max(1e-15);
                    accepted = true;
                    break;
                }
            }
            damping *= 10.0;
        }
        if !accepted || step_size <= 1e-15 * (1.0 + u.amax()) || cost == 0.0 {
            break;
        }
    }
    (zetas, weights, iterations)
}

/// Lawson–Hanson non-negative least squares `min ‖Ax − b‖, x ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-12 * (a.transpose() * b).amax().max(1e-300);
    for _ in 0..3 * n + 3 {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..n).filter(|&j| !passive[j] && w[j] > tol).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else { break };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let sub = DMatrix::from_fn(a.nrows(), idx.len(), |r, c| a[(r, idx[c])]);
            let zs = linalg::lstsq(&sub, b);
            let mut z = DVector::zeros(n);
            for (c, &i) in idx.iter().enumerate() {
                z[i] = zs[c];
            }
            if idx.iter().all(|&i| z[i] > 0.0) {
                x = z;
                break;
            }
            let alpha = idx
                .iter()
                .filter(|&&i| z[i] <= 0.0)
                .map(|&i| x[i] / (x[i] - z[i]))
                .fold(f64::INFINITY, f64::min);
            x = &x + (&z - &x) * alpha;
            for &i in &idx {
                if x[i] <= 1e-300 {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
    x
}

/// A point `y` with samples `(t, u(t, y))`.
pub type PointSeries = (Vec<f64>, Vec<(f64, f64)>);

/// Recovers `ψᵢ(y) = ŵᵢ(y)/wᵢ` at each sampled point by non-negative least
/// squares against the fixed exponents of `nu`. `tol` bounds the fit residual
/// relative to the largest sample at that point.
pub fn recover_selection(
    samples_by_point: &[PointSeries],
    nu: &SpectralMeasure,
    tol: f64,
) -> Result<EigenfunctionSelection, SpectralError> {
    let m = nu.atoms.len();
    let zetas: Vec<f64> = nu.atoms.iter().map(|a| a.zeta).collect();
    let mut points = Vec::with_capacity(samples_by_point.len() + 1);
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); m];
    let is_y0 = |y: &[f64]| y.len() == nu.y0.len() && y.iter().zip(&nu.y0).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    let mut saw_y0 = false;
    for (y, series) in samples_by_point {
        if series.is_empty() {
            return Err(SpectralError::Samples(format!("empty series at y = {y:?}")));
        }
        if let Some((t, u)) = series.iter().find(|(_, u)| !(*u > 0.0)) {
            return Err(SpectralError::Samples(format!("u({t}, {y:?}) = {u} is not positive")));
        }
        let t: Vec<f64> = series.iter().map(|s| s.0).collect();
        let u = DVector::from_iterator(series.len(), series.iter().map(|s| s.1));
        let e = exp_matrix(&t, &zetas);
        let w = nnls(&e, &u);
        let residual = (&e * &w - &u).amax();
        if residual > tol * u.amax() {
            return Err(SpectralError::Inconsistent { y: y.clone(), residual, tol });
        }
        let at_y0 = is_y0(y);
        saw_y0 |= at_y0;
        for i in 0..m {
            let psi = w[i] / nu.atoms[i].weight;
            if at_y0 && (psi - 1.0).abs() > tol.max(1e-10) * 1e2 {
                return Err(SpectralError::Inconsistent { y: y.clone(), residual: (psi - 1.0).abs(), tol });
            }
            values[i].push(if at_y0 { 1.0 } else { psi });
        }
        points.push(y.clone());
    }
    if !saw_y0 {
        points.push(nu.y0.clone());
        for v in &mut values {
            v.push(1.0);
        }
    }
    let functions = values.into_iter().map(|v| Eigenfunction::PointTable { points: points.clone(), values: v }).collect();
    EigenfunctionSelection::new(nu.y0.clone(), functions)
}

/// Output of [`radial_ode_diagnostic`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RadialDiagnostic {
    pub r: Vec<f64>,
    pub g0: Vec<f64>,
    /// `∫₁^{r_max} t^{k−3} g₀² (∫ₜ^∞ s^{1−k} g₀^{−2} ds) dt`; `None` when `g₀` vanishes
    /// first, `+∞` when the inner integral diverges.
    pub truncated_integral: Option<f64>,
    /// Partial integrals at `r_max/4, r_max/2, r_max` (lower ends clamped at 1).
    pub partial_integrals: Vec<(f64, f64)>,
    pub growth_flag: bool,
    pub first_zero: Option<f64>,
}

/// Heuristic divergence check for the radial integral condition. The inner
/// integral is closed beyond `2 r_max` by the local decay rate of its integrand.
pub fn radial_ode_diagnostic(
    p0: &dyn Fn(f64) -> f64,
    zeta: f64,
    k: usize,
    r_max: f64,
    samples: usize,
) -> Result<RadialDiagnostic, SpectralError> {
    if k < 2 || !(r_max > 1.0) || !r_max.is_finite() {
        return Err(SpectralError::Radial { k, r_max });
    }
    let kf = k as f64;
    let r_ext = 2.0 * r_max;
    let mut checkpoints: Vec<f64> = vec![(r_max / 4.0).max(1.0), (r_max / 2.0).max(1.0), r_max];
    checkpoints.dedup();
    let samples = samples.max(2);
    let mut stops: Vec<f64> = (1..=samples).map(|j| r_max * j as f64 / samples as f64).collect();
    stops.extend([1.0, r_ext]);
    stops.extend(checkpoints.iter().cloned());
    stops.sort_by(|a, b| a.total_cmp(b));
    stops.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * b.abs());

    let r0 = 1e-3f64.min(0.5 * stops[0]);
    let c = zeta - p0(r0);
    let c2 = -c / (2.0 * kf);
    let c4 = -c * c2 / (4.0 * (kf + 2.0));
    // state: g, g', W = ∫₁ʳ t^{k−3}g², Z = ∫₁ʳ W f, G = ∫₁ʳ f  with f = s^{1−k}g^{−2}
    let mut state = vec![1.0 + c2 * r0 * r0 + c4 * r0.powi(4), 2.0 * c2 * r0 + 4.0 * c4 * r0.powi(3), 0.0, 0.0, 0.0];
    let mut r_out = vec![0.0];
    let mut g_out = vec![1.0];
    let opts = OdeOptions { rtol: 1e-12, atol: 1e-14, ..OdeOptions::default() };
    let mut t = r0;
    let mut first_zero = None;
    let mut at_check: Vec<(f64, [f64; 5])> = Vec::new();
    for &stop in &stops {
        let integrate_tail = t >= 1.0 - 1e-14;
        let inside = stop <= r_max * (1.0 + 1e-14);
        let rhs = |r: f64, s: &[f64], d: &mut [f64]| {
            d[0] = s[1];
            d[1] = -(kf - 1.0) / r * s[1] - (zeta - p0(r)) * s[0];
            if integrate_tail {
                let w = r.powf(kf - 3.0) * s[0] * s[0];
                let f = r.powf(1.0 - kf) / (s[0] * s[0]);
                d[2] = if inside { w } else { 0.0 };
                d[3] = if inside { s[2] * f } else { 0.0 };
                d[4] = f;
            } else {
                d[2] = 0.0;
                d[3] = 0.0;
                d[4] = 0.0;
            }
        };
        let mut crossed = None;
        let run = ode::integrate(rhs, t, &state, stop, &opts, |r, s| {
            if s[0] <= 0.0 {
                crossed = Some(r);
                Control::Stop
            } else {
                Control::Continue
            }
        });
        // With g₀ → 0 the integrand s^{1−k}g₀^{−2} stops the integrator just before the zero.
        let (tt, s) = match run {
            Err(OdeError::NonFinite { t: z } | OdeError::StepUnderflow { t: z }) if integrate_tail => {
                first_zero = Some(z);
                break;
            }
            other => other?,
        };
        if let Some(z) = crossed {
            first_zero = Some(z);
            if tt <= r_max {
                r_out.push(tt);
                g_out.push(s[0]);
            }
            break;
        }
        t = tt;
        state = s;
        if stop <= r_max * (1.0 + 1e-14) {
            r_out.push(stop);
            g_out.push(state[0]);
        }
        if checkpoints.iter().any(|&c| (c - stop).abs() <= 1e-14 * c) {
            at_check.push((stop, [state[0], state[1], state[2], state[3], state[4]]));
        }
    }
    if first_zero.is_some() {
        return Ok(RadialDiagnostic {
            r: r_out,
            g0: g_out,
            truncated_integral: None,
            partial_integrals: vec![],
            growth_flag: false,
            first_zero,
        });
    }
    // Inner tail beyond R: ∫_R^∞ f ≈ f(R) / (2g'/g + (k−2)/R).
    let (g, dg) = (state[0], state[1]);
    let f_r = r_ext.powf(1.0 - kf) / (g * g);
    let denom = 2.0 * dg / g + (kf - 2.0) / r_ext;
    let tail = if denom > 0.0 { f_r / denom } else { f64::INFINITY };
    let g_total = state[4];
    let partial_integrals: Vec<(f64, f64)> = at_check
        .iter()
        .map(|(r, s)| {
            // inner(r) = ∫_r^∞ f = G(R) − G(r) + tail ; outer(r) = W(r)·inner(r) + Z(r)
            let inner = g_total - s[4] + tail;
            let outer = if s[2] == 0.0 { s[3] } else { s[2] * inner + s[3] };
            (*r, outer)
        })
        .collect();
    let truncated = partial_integrals.last().map(|p| p.1).unwrap_or(0.0);
    let growth_flag = if !truncated.is_finite() {
        true
    } else {
        match partial_integrals.as_slice() {
            [(_, a), (_, b), (_, c)] => {
                let prev = b - a;
                let last = c - b;
                last > 0.0 && last >= 0.75 * prev
            }
            _ => false,
        }
    };
    Ok(RadialDiagnostic { r: r_out, g0: g_out, truncated_integral: Some(truncated), partial_integrals, growth_flag, first_zero: None })
}

/// Reads a `(t, u)` sample series from CSV with a header row.
pub fn read_series_csv(path: &Path) -> Result<Vec<(f64, f64)>, SpectralError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| SpectralError::Io(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| SpectralError::Io(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| SpectralError::Samples(format!("missing column `{name}` in {}", path.display())))
    };
    let (it, iu) = (col("t")?, col("u")?);
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| SpectralError::Io(e.to_string()))?;
        let parse = |i: usize, name: &str| {
            rec.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| SpectralError::Samples(format!("row {}: column `{name}` is not a number", line + 1)))
        };
        out.push((parse(it, "t")?, parse(iu, "u")?));
    }
    Ok(out)
}

pub fn write_series_csv(path: &Path, series: &[(f64, f64)]) -> Result<(), SpectralError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SpectralError::Io(e.to_string()))?;
    w.write_record(["t", "u"]).map_err(|e| SpectralError::Io(e.to_string()))?;
    for (t, u) in series {
        w.write_record([format!("{t:e}"), format!("{u:e}")]).map_err(|e| SpectralError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| SpectralError::Io(e.to_string()))
}

/// `u(t_j)` at `n` uniform times on `[0, t_max]` at `y₀`.
pub fn sample_series(nu: &SpectralMeasure, n: usize, t_max: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|j| {
            let t = t_max * j as f64 / (n - 1) as f64;
            (t, nu.laplace(t))
        })
        .collect()
}
