//! Affine EVE factor models on `[0, ∞)ᵏ`.
//!
//! With `λᵀλ = Λᵀy + λ₀`, `κᵀκ = diag(Lᵢ yᵢ)`, `Γκᵀρᵀλ = Nᵀy + c` and
//! `h(y) = exp(Hᵀy + h₀)`, the linear PDE `∂ₜu + 𝓛u = 0` is solved by
//! `u(t, y) = exp(Φ(t)ᵀy + Θ(t))` where
//!
//! ```text
//! Φ̇ᵢ + ½ Lᵢ Φᵢ² + Σⱼ (M+N)ᵢⱼ Φⱼ + (Γ/2q) Λᵢ = 0
//! Θ̇  + (w + c)ᵀ Φ + (Γ/2q) λ₀          = 0
//! ```
//!
//! anchored at `Φ(0) = H, Θ(0) = h₀` for forward performance processes or
//! `Φ(T) = H, Θ(T) = h₀` for the Merton problem.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::model::{self, Domain, MatrixFn, ModelError, ModelSpec, RiskParams, VectorFn};
use crate::ode::{self, Control, OdeError, OdeOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AffineError {
    #[error("invalid affine spec field `{field}`: {reason}")]
    InvalidSpec { field: String, reason: String },
    #[error("closed form inapplicable: {0}")]
    InapplicableClosedForm(String),
    #[error("component {component}: H = z₋ = {z_minus}, χ undefined")]
    DegenerateChi { component: usize, z_minus: f64 },
    #[error("Riccati solution blows up at t = {time} (component {component})")]
    BlowUp { time: f64, component: usize },
    #[error("horizon must be positive and finite, got {0}")]
    Horizon(f64),
    #[error("time {t} outside solved horizon [0, {horizon}]")]
    OutsideHorizon { t: f64, horizon: f64 },
    #[error("point {0:?} outside [0,∞)ᵏ")]
    OutsideDomain(Vec<f64>),
    #[error("exponent {0} overflows")]
    Overflow(f64),
    #[error("x must be positive, got {0}")]
    Wealth(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("model is not affine: {0}")]
    NotAffine(String),
}

/// Parameters of an affine EVE model with exponential-affine utility weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineSpec {
    #[serde(rename = "M")]
    pub m: Vec<Vec<f64>>,
    pub w: Vec<f64>,
    #[serde(rename = "L")]
    pub l: Vec<f64>,
    #[serde(rename = "Lambda")]
    pub lambda: Vec<f64>,
    pub lambda0: f64,
    #[serde(rename = "N")]
    pub n: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    #[serde(rename = "H")]
    pub h: Vec<f64>,
    pub h0: f64,
}

fn invalid(field: &str, reason: impl Into<String>) -> AffineError {
    AffineError::InvalidSpec { field: field.into(), reason: reason.into() }
}

impl AffineSpec {
    pub fn k(&self) -> usize {
        self.w.len()
    }

    pub fn check(&self) -> Result<(), AffineError> {
        let k = self.k();
        if k == 0 {
            return Err(invalid("w", "need at least one factor"));
        }
        for (name, v) in [("L", &self.l), ("Lambda", &self.lambda), ("c", &self.c), ("H", &self.h)] {
            if v.len() != k {
                return Err(invalid(name, format!("expected {k} entries, got {}", v.len())));
            }
        }
        for (name, m) in [("M", &self.m), ("N", &self.n)] {
            if m.len() != k || m.iter().any(|r| r.len() != k) {
                return Err(invalid(name, format!("expected a {k}×{k} matrix")));
            }
        }
        if let Some(i) = self.l.iter().position(|&l| !(l > 0.0)) {
            return Err(invalid("L", format!("L_{} = {} must be positive", i + 1, self.l[i])));
        }
        for i in 0..k {
            for j in 0..k {
                if i != j && self.m[i][j] < 0.0 {
                    return Err(invalid("M", format!("off-diagonal M[{i}][{j}] = {} is negative", self.m[i][j])));
                }
            }
        }
        if let Some(i) = self.w.iter().position(|&w| w < 0.0) {
            return Err(invalid("w", format!("w_{} = {} is negative", i + 1, self.w[i])));
        }
        // Λᵀy + λ₀ ≥ 0 on [0,∞)ᵏ  ⇔  λ₀ ≥ 0 and Λ ≥ 0.
        if self.lambda0 < 0.0 || self.lambda.iter().any(|&v| v < 0.0) {
            return Err(invalid("Lambda", "Λᵀy + λ₀ must be non-negative on [0,∞)ᵏ"));
        }
        Ok(())
    }

    pub fn m_plus_n(&self) -> DMatrix<f64> {
        linalg::from_rows(&self.m) + linalg::from_rows(&self.n)
    }

    pub fn is_diagonal(&self) -> bool {
        let mn = self.m_plus_n();
        (0..self.k()).all(|i| (0..self.k()).all(|j| i == j || mn[(i, j)] == 0.0))
    }

    /// Reads off `(M, w, L, Λ, λ₀, N, c)` from a model by evaluating its
    /// coefficients at `1` and `1 + eᵢ`, then checks affinity on a probe set.
    pub fn from_model(spec: &ModelSpec, rp: &RiskParams, h: Vec<f64>, h0: f64) -> Result<AffineSpec, AffineError> {
        spec.check()?;
        let k = spec.k;
        let base = vec![1.0; k];
        let rho_t = spec.rho_matrix().transpose();
        let lam_sq = |y: &[f64]| -> Result<f64, AffineError> { Ok(model::sharpe_ratio(spec, y)?.norm_squared()) };
        let cross = |y: &[f64]| -> Result<DVector<f64>, AffineError> {
            let lam = model::sharpe_ratio(spec, y)?;
            Ok(spec.kappa(y).transpose() * &rho_t * lam * rp.big_gamma())
        };
        let alpha0 = spec.alpha(&base);
        let l0 = lam_sq(&base)?;
        let c0 = cross(&base)?;
        let mut mt = DMatrix::zeros(k, k);
        let mut nt = DMatrix::zeros(k, k);
        let mut lambda = vec![0.0; k];
        let mut l = vec![0.0; k];
        for i in 0..k {
            let mut y = base.clone();
            y[i] += 1.0;
            mt.set_column(i, &(spec.alpha(&y) - &alpha0));
            nt.set_column(i, &(cross(&y)? - &c0));
            lambda[i] = lam_sq(&y)? - l0;
            let a = spec.kappa(&y).transpose() * spec.kappa(&y);
            let a0 = spec.kappa(&base).transpose() * spec.kappa(&base);
            l[i] = a[(i, i)] - a0[(i, i)];
        }
        let ones = DVector::from_element(k, 1.0);
        let w = &alpha0 - &mt * &ones;
        let c = &c0 - &nt * &ones;
        let lambda0 = l0 - lambda.iter().sum::<f64>();
        let out = AffineSpec {
            m: linalg::to_rows(&mt.transpose()),
            w: w.iter().cloned().collect(),
            l,
            lambda: lambda.clone(),
            lambda0,
            n: linalg::to_rows(&nt.transpose()),
            c: c.iter().cloned().collect(),
            h,
            h0,
        };
        // Probe affinity away from the base points.
        let probes: Vec<Vec<f64>> = (0..4)
            .map(|j| (0..k).map(|i| 0.3 + 0.7 * ((i + 2 * j) % 5) as f64).collect())
            .collect();
        let lam_v = DVector::from_vec(lambda);
        for y in &probes {
            let yv = DVector::from_column_slice(y);
            let tol = 1e-9 * (1.0 + yv.amax());
            let e1 = (lam_sq(y)? - lam_v.dot(&yv) - lambda0).abs();
            let e2 = (cross(y)? - nt.clone() * &yv - &c).amax();
            let e3 = (spec.alpha(y) - &mt * &yv - &w).amax();
            let a = spec.kappa(y).transpose() * spec.kappa(y);
            let diag = DMatrix::from_diagonal(&DVector::from_iterator(k, (0..k).map(|i| out.l[i] * y[i])));
            let e4 = (a - diag).amax();
            if e1 > tol || e2 > tol || e3 > tol || e4 > tol {
                return Err(AffineError::NotAffine(format!(
                    "at y = {y:?}: residuals λᵀλ {e1:.2e}, Γκᵀρᵀλ {e2:.2e}, α {e3:.2e}, κᵀκ {e4:.2e}"
                )));
            }
        }
        out.check()?;
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `Φ(0) = H`: forward performance process.
    Forward,
    /// `Φ(T) = H`: Merton value function.
    Backward,
}

impl std::str::FromStr for Direction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            other => Err(format!("unknown direction `{other}` (expected forward|backward)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ClosedForm,
    Numeric,
}

/// Per-component data of the explicit solution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClosedComponent {
    pub d: f64,
    pub z_plus: f64,
    pub z_minus: f64,
    /// `χ` in `Φ(t) = (z₊ − χ z₋ e^{−√D t}) / (1 − χ e^{−√D t})`.
    pub chi: f64,
    /// `(z₊ − H)/(z₋ − H)`, the same constant relative to the anchoring time.
    #[serde(skip)]
    chi_anchor: f64,
}

#[derive(Clone, Debug)]
struct Coefficients {
    l: Vec<f64>,
    mn: DMatrix<f64>,
    forcing: Vec<f64>,
    wc: Vec<f64>,
    theta_forcing: f64,
    h: Vec<f64>,
    h0: f64,
}

impl Coefficients {
    fn new(spec: &AffineSpec, rp: &RiskParams) -> Self {
        let s = rp.potential_scale();
        Coefficients {
            l: spec.l.clone(),
            mn: spec.m_plus_n(),
            forcing: spec.lambda.iter().map(|v| s * v).collect(),
            wc: spec.w.iter().zip(&spec.c).map(|(a, b)| a + b).collect(),
            theta_forcing: s * spec.lambda0,
            h: spec.h.clone(),
            h0: spec.h0,
        }
    }

    fn phi_dot(&self, phi: &[f64], out: &mut [f64]) {
        let k = phi.len();
        for i in 0..k {
            let mut s = 0.5 * self.l[i] * phi[i] * phi[i] + self.forcing[i];
            s += phi.iter().enumerate().map(|(j, p)| self.mn[(i, j)] * p).sum::<f64>();
            out[i] = -s;
        }
    }

    fn phi_ddot(&self, phi: &[f64], dphi: &[f64], out: &mut [f64]) {
        let k = phi.len();
        for i in 0..k {
            let mut s = self.l[i] * phi[i] * dphi[i];
            s += dphi.iter().enumerate().map(|(j, d)| self.mn[(i, j)] * d).sum::<f64>();
            out[i] = -s;
        }
    }

    fn theta_dot(&self, phi: &[f64]) -> f64 {
        -(self.wc.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>() + self.theta_forcing)
    }
}

#[derive(Clone, Debug)]
struct NumericPath {
    t: Vec<f64>,
    phi: Vec<Vec<f64>>,
    dphi: Vec<Vec<f64>>,
    ddphi: Vec<Vec<f64>>,
    theta: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Repr {
    Closed(Vec<ClosedComponent>),
    Numeric(NumericPath),
}

/// Solution `(Φ, Θ)` on `[0, T]`. Immutable once built.
#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    pub direction: Direction,
    pub method: Method,
    pub horizon: f64,
    coef: Coefficients,
    repr: Repr,
}

/// Threshold on `|Φᵢ|` that counts as finite-time blow-up.
pub const BLOW_UP: f64 = 1e8;
/// Target absolute accuracy of the Θ quadrature.
pub const THETA_QUAD_TOL: f64 = 1e-11;

fn anchor_time(direction: Direction, horizon: f64) -> f64 {
    match direction {
        Direction::Forward => 0.0,
        Direction::Backward => horizon,
    }
}

fn check_horizon(horizon: f64) -> Result<(), AffineError> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(AffineError::Horizon(horizon));
    }
    Ok(())
}

pub fn solve_riccati_numeric(
    spec: &AffineSpec,
    rp: &RiskParams,
    horizon: f64,
    direction: Direction,
) -> Result<RiccatiSolution, AffineError> {
    spec.check()?;
    check_horizon(horizon)?;
    let coef = Coefficients::new(spec, rp);
    let k = spec.k();
    let t_a = anchor_time(direction, horizon);
    let t_b = horizon - t_a;
    let opts = OdeOptions { rtol: 1e-10, atol: 1e-12, h_max: horizon / 200.0, max_steps: 2_000_000 };
    let mut ts = Vec::new();
    let mut phis: Vec<Vec<f64>> = Vec::new();
    let mut blown: Option<(f64, usize)> = None;
    ode::integrate(
        |_, y, d| coef.phi_dot(y, d),
        t_a,
        &coef.h,
        t_b,
        &opts,
        |t, y| {
            if let Some(i) = y.iter().position(|v| v.abs() > BLOW_UP) {
                blown = Some((t, i));
                return Control::Stop;
            }
            ts.push(t);
            phis.push(y.to_vec());
            Control::Continue
        },
    )
    .map_err(|e| match e {
        OdeError::StepUnderflow { t } | OdeError::NonFinite { t } => AffineError::BlowUp { time: t, component: 0 },
        other => AffineError::Ode(other),
    })?;
    if let Some((time, component)) = blown {
        return Err(AffineError::BlowUp { time, component });
    }
    if direction == Direction::Backward {
        ts.reverse();
        phis.reverse();
    }
    let mut dphi = vec![vec![0.0; k]; ts.len()];
    let mut ddphi = vec![vec![0.0; k]; ts.len()];
    for i in 0..ts.len() {
        coef.phi_dot(&phis[i], &mut dphi[i]);
        let d = dphi[i].clone();
        coef.phi_ddot(&phis[i], &d, &mut ddphi[i]);
    }
    let mut path = NumericPath { t: ts, phi: phis, dphi, ddphi, theta: vec![] };
    // Θ at nodes by adaptive Simpson between neighbours, accumulated away from the anchor.
    let nodes = path.t.len();
    let mut theta = vec![0.0; nodes];
    let tol = THETA_QUAD_TOL / nodes as f64;
    match direction {
        Direction::Forward => {
            theta[0] = coef.h0;
            for i in 1..nodes {
                theta[i] = theta[i - 1] + simpson(|s| coef.theta_dot(&path.phi_at(s, i - 1)), path.t[i - 1], path.t[i], tol);
            }
        }
        Direction::Backward => {
            theta[nodes - 1] = coef.h0;
            for i in (0..nodes - 1).rev() {
                theta[i] = theta[i + 1] - simpson(|s| coef.theta_dot(&path.phi_at(s, i)), path.t[i], path.t[i + 1], tol);
            }
        }
    }
    path.theta = theta;
    Ok(RiccatiSolution { direction, method: Method::Numeric, horizon, coef, repr: Repr::Numeric(path) })
}

pub fn solve_riccati_closed_form(
    spec: &AffineSpec,
    rp: &RiskParams,
    horizon: f64,
    direction: Direction,
) -> Result<RiccatiSolution, AffineError> {
    spec.check()?;
    check_horizon(horizon)?;
    if !spec.is_diagonal() {
        return Err(AffineError::InapplicableClosedForm("M + N is not diagonal".into()));
    }
    let coef = Coefficients::new(spec, rp);
    let t_a = anchor_time(direction, horizon);
    let mut comps = Vec::with_capacity(spec.k());
    for i in 0..spec.k() {
        let m = coef.mn[(i, i)];
        let l = coef.l[i];
        // ½ L z² + m z + (Γ/2q)Λ = 0
        let d = m * m - 2.0 * l * coef.forcing[i];
        if !(d > 0.0) {
            return Err(AffineError::InapplicableClosedForm(format!("discriminant D_{} = {d} is not positive", i + 1)));
        }
        let sd = d.sqrt();
        let z_plus = (-m + sd) / l;
        let z_minus = (-m - sd) / l;
        let h = coef.h[i];
        if h == z_minus {
            return Err(AffineError::DegenerateChi { component: i, z_minus });
        }
        // Φ(t_a) = H  ⇒  (z₊ − H) = χ e^{−√D t_a} (z₋ − H).
        let chi_anchor = (z_plus - h) / (z_minus - h);
        let chi = chi_anchor * (sd * t_a).exp();
        if chi_anchor > 0.0 {
            // 1 − χ_a e^{−√D (t − t_a)} vanishes at t* = t_a + ln(χ_a)/√D.
            let t_star = t_a + chi_anchor.ln() / sd;
            if (0.0..=horizon).contains(&t_star) {
                return Err(AffineError::BlowUp { time: t_star, component: i });
            }
        }
        comps.push(ClosedComponent { d, z_plus, z_minus, chi, chi_anchor });
    }
    Ok(RiccatiSolution { direction, method: Method::ClosedForm, horizon, coef, repr: Repr::Closed(comps) })
}

/// Closed form when applicable, otherwise numeric.
pub fn solve_riccati(
    spec: &AffineSpec,
    rp: &RiskParams,
    horizon: f64,
    direction: Direction,
) -> Result<RiccatiSolution, AffineError> {
    match solve_riccati_closed_form(spec, rp, horizon, direction) {
        Ok(s) => Ok(s),
        Err(AffineError::InapplicableClosedForm(_)) | Err(AffineError::DegenerateChi { .. }) => {
            solve_riccati_numeric(spec, rp, horizon, direction)
        }
        Err(e) => Err(e),
    }
}

impl NumericPath {
    fn locate(&self, t: f64) -> usize {
        let n = self.t.len();
        match self.t.partition_point(|&s| s <= t) {
            0 => 0,
            p => (p - 1).min(n - 2),
        }
    }

    /// Quintic Hermite interpolation on interval `i`: value, first and second derivative.
    fn hermite(&self, t: f64, i: usize) -> (Vec<f64>, Vec<f64>) {
        let (t0, t1) = (self.t[i], self.t[i + 1]);
        let h = t1 - t0;
        let u = (t - t0) / h;
        let (u2, u3, u4, u5) = (u * u, u * u * u, u.powi(4), u.powi(5));
        let h0 = 1.0 - 10.0 * u3 + 15.0 * u4 - 6.0 * u5;
        let h1 = u - 6.0 * u3 + 8.0 * u4 - 3.0 * u5;
        let h2 = 0.5 * (u2 - 3.0 * u3 + 3.0 * u4 - u5);
        let h3 = 0.5 * (u3 - 2.0 * u4 + u5);
        let h4 = -4.0 * u3 + 7.0 * u4 - 3.0 * u5;
        let h5 = 10.0 * u3 - 15.0 * u4 + 6.0 * u5;
        let d0 = -30.0 * u2 + 60.0 * u3 - 30.0 * u4;
        let d1 = 1.0 - 18.0 * u2 + 32.0 * u3 - 15.0 * u4;
        let d2 = 0.5 * (2.0 * u - 9.0 * u2 + 12.0 * u3 - 5.0 * u4);
        let d3 = 0.5 * (3.0 * u2 - 8.0 * u3 + 5.0 * u4);
        let d4 = -12.0 * u2 + 28.0 * u3 - 15.0 * u4;
        let d5 = 30.0 * u2 - 60.0 * u3 + 30.0 * u4;
        let k = self.phi[i].len();
        let mut v = vec![0.0; k];
        let mut dv = vec![0.0; k];
        for j in 0..k {
            let (y0, y1) = (self.phi[i][j], self.phi[i + 1][j]);
            let (p0, p1) = (self.dphi[i][j], self.dphi[i + 1][j]);
            let (s0, s1) = (self.ddphi[i][j], self.ddphi[i + 1][j]);
            v[j] = y0 * h0 + h * p0 * h1 + h * h * s0 * h2 + y1 * h5 + h * p1 * h4 + h * h * s1 * h3;
            dv[j] = (y0 * d0 + h * p0 * d1 + h * h * s0 * d2 + y1 * d5 + h * p1 * d4 + h * h * s1 * d3) / h;
        }
        (v, dv)
    }

    fn phi_at(&self, t: f64, i: usize) -> Vec<f64> {
        self.hermite(t, i).0
    }
}

/// Adaptive Simpson quadrature to absolute tolerance `tol`.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(&f, a, b, fa, fm, fb, whole, tol, 40)
}

impl RiccatiSolution {
    pub fn k(&self) -> usize {
        self.coef.h.len()
    }

    pub fn anchor_time(&self) -> f64 {
        anchor_time(self.direction, self.horizon)
    }

    pub fn components(&self) -> Option<&[ClosedComponent]> {
        match &self.repr {
            Repr::Closed(c) => Some(c),
            Repr::Numeric(_) => None,
        }
    }

    fn exp_term(&self, comp: &ClosedComponent, t: f64) -> f64 {
        comp.chi_anchor * (-comp.d.sqrt() * (t - self.anchor_time())).exp()
    }

    pub fn phi(&self, t: f64) -> DVector<f64> {
        match &self.repr {
            Repr::Closed(comps) => DVector::from_iterator(
                comps.len(),
                comps.iter().map(|c| {
                    let e = self.exp_term(c, t);
                    (c.z_plus - c.z_minus * e) / (1.0 - e)
                }),
            ),
            Repr::Numeric(path) => DVector::from_vec(path.phi_at(t, path.locate(t))),
        }
    }

    /// Time derivative of the represented `Φ` (analytic for the closed form,
    /// derivative of the interpolant otherwise).
    pub fn phi_dot(&self, t: f64) -> DVector<f64> {
        match &self.repr {
            Repr::Closed(comps) => DVector::from_iterator(
                comps.len(),
                comps.iter().map(|c| {
                    let e = self.exp_term(c, t);
                    let sd = c.d.sqrt();
                    // d/dt of (z₊ − z₋E)/(1 − E) with Ė = −√D E.
                    -sd * e * (c.z_plus - c.z_minus) / ((1.0 - e) * (1.0 - e))
                }),
            ),
            Repr::Numeric(path) => DVector::from_vec(path.hermite(t, path.locate(t)).1),
        }
    }

    pub fn theta(&self, t: f64) -> f64 {
        let t_a = self.anchor_time();
        match &self.repr {
            Repr::Closed(comps) => {
                let mut s = 0.0;
                for (i, c) in comps.iter().enumerate() {
                    // ∫_{t_a}^{t} Φᵢ = z₊ (t − t_a) + (2/Lᵢ) ln|(1 − E(t)) / (1 − E(t_a))|
                    let e = self.exp_term(c, t);
                    let integral = c.z_plus * (t - t_a) + 2.0 / self.coef.l[i] * ((1.0 - e).abs().ln() - (1.0 - c.chi_anchor).abs().ln());
                    s += self.coef.wc[i] * integral;
                }
                self.coef.h0 - s - self.coef.theta_forcing * (t - t_a)
            }
            Repr::Numeric(path) => {
                let i = path.locate(t);
                let tol = THETA_QUAD_TOL;
                let t0 = path.t[i];
                path.theta[i] + simpson(|s| self.coef.theta_dot(&path.phi_at(s, i)), t0, t, tol)
            }
        }
    }

    pub fn theta_dot(&self, t: f64) -> f64 {
        match &self.repr {
            Repr::Closed(comps) => {
                let mut s = 0.0;
                for (i, c) in comps.iter().enumerate() {
                    let e = self.exp_term(c, t);
                    s += self.coef.wc[i] * (c.z_plus + 2.0 / self.coef.l[i] * c.d.sqrt() * e / (1.0 - e));
                }
                -s - self.coef.theta_forcing
            }
            Repr::Numeric(_) => {
                // Fourth-order central difference of the quadrature-based Θ;
                // near the ends fall back to the defining right-hand side.
                let h = 1e-3 * self.horizon;
                if t < 2.0 * h || t > self.horizon - 2.0 * h {
                    return self.coef.theta_dot(self.phi(t).as_slice());
                }
                (-self.theta(t + 2.0 * h) + 8.0 * self.theta(t + h) - 8.0 * self.theta(t - h) + self.theta(t - 2.0 * h))
                    / (12.0 * h)
            }
        }
    }

    /// Componentwise residual of the Φ equation at `t`.
    pub fn phi_residual(&self, t: f64) -> DVector<f64> {
        let phi = self.phi(t);
        let mut f = vec![0.0; phi.len()];
        self.coef.phi_dot(phi.as_slice(), &mut f);
        self.phi_dot(t) - DVector::from_vec(f)
    }

    pub fn theta_residual(&self, t: f64) -> f64 {
        self.theta_dot(t) - self.coef.theta_dot(self.phi(t).as_slice())
    }

    /// Largest residuals of both equations over `samples` uniform times.
    pub fn max_residuals(&self, samples: usize) -> (f64, f64) {
        let (mut rp, mut rt) = (0.0f64, 0.0f64);
        for j in 0..samples {
            let t = self.horizon * j as f64 / (samples - 1).max(1) as f64;
            rp = rp.max(self.phi_residual(t).amax());
            rt = rt.max(self.theta_residual(t).abs());
        }
        (rp, rt)
    }

    fn check_time(&self, t: f64) -> Result<(), AffineError> {
        let eps = 1e-12 * self.horizon;
        if !(t >= -eps && t <= self.horizon + eps) {
            return Err(AffineError::OutsideHorizon { t, horizon: self.horizon });
        }
        Ok(())
    }

    /// `(t, Φ(t), Θ(t))` on `samples` uniform times.
    pub fn uniform_grid(&self, samples: usize) -> Vec<(f64, DVector<f64>, f64)> {
        (0..samples)
            .map(|j| {
                let t = self.horizon * j as f64 / (samples - 1).max(1) as f64;
                (t, self.phi(t), self.theta(t))
            })
            .collect()
    }
}

const EXP_LIMIT: f64 = 700.0;

/// `u(t, y) = exp(Φ(t)ᵀy + Θ(t))`.
pub fn evaluate_u_affine(sol: &RiccatiSolution, t: f64, y: &[f64]) -> Result<f64, AffineError> {
    sol.check_time(t)?;
    if y.len() != sol.k() || y.iter().any(|&v| !(v >= 0.0)) {
        return Err(AffineError::OutsideDomain(y.to_vec()));
    }
    let e = sol.phi(t).iter().zip(y).map(|(a, b)| a * b).sum::<f64>() + sol.theta(t);
    if e > EXP_LIMIT {
        return Err(AffineError::Overflow(e));
    }
    Ok(e.exp())
}

/// `γ^γ x^{1−γ}/(1−γ) · u(t, y)^q`.
pub fn evaluate_fpp(sol: &RiccatiSolution, rp: &RiskParams, t: f64, x: f64, y: &[f64]) -> Result<f64, AffineError> {
    if !(x > 0.0) {
        return Err(AffineError::Wealth(x));
    }
    let u = evaluate_u_affine(sol, t, y)?;
    Ok(rp.power_utility(x) * u.powf(rp.q()))
}

/// Hedging-adjusted Merton portfolio
/// `π* = (1/γ)[(σᵀσ)⁻¹μ + q ς κ Φ(t)]` with `ς = σ⁻ρ`.
pub fn optimal_portfolio_affine(
    sol: &RiccatiSolution,
    spec_model: &ModelSpec,
    rp: &RiskParams,
    t: f64,
    y: &[f64],
) -> Result<DVector<f64>, AffineError> {
    sol.check_time(t)?;
    let sigma = spec_model.sigma(y);
    let (pinv, rank) = linalg::pinv(&sigma);
    if rank < spec_model.n {
        return Err(ModelError::Singular { y: y.to_vec(), rank, n: spec_model.n }.into());
    }
    let myopic = &pinv * pinv.transpose() * spec_model.mu(y);
    let varsigma = &pinv * spec_model.rho_matrix();
    let hedge = varsigma * spec_model.kappa(y) * sol.phi(t) * rp.q();
    Ok((myopic + hedge) / rp.gamma())
}

/// One-direction-per-factor square-root market:
///
/// * factor `i`: `dYᵢ = ((Mᵀy)ᵢ + wᵢ) dt + √(Lᵢ Yᵢ) dBᵢ`;
/// * stock `i ≤ k`: variance `vᵢ Yᵢ`, drift `θᵢ vᵢ Yᵢ` (Sharpe ratio `θᵢ √(vᵢYᵢ)`);
/// * extra stocks: constant drifts/volatilities, uncorrelated with the factors;
/// * `ρ = √p [I_k; 0]`, so `ρᵀρ = pI`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SquareRootMarket {
    #[serde(rename = "M")]
    pub m: Vec<Vec<f64>>,
    pub w: Vec<f64>,
    #[serde(rename = "L")]
    pub l: Vec<f64>,
    pub variance_scale: Vec<f64>,
    pub sharpe_loading: Vec<f64>,
    pub p: f64,
    #[serde(default)]
    pub extra_mu: Vec<f64>,
    #[serde(default)]
    pub extra_sigma: Vec<f64>,
}

impl SquareRootMarket {
    pub fn k(&self) -> usize {
        self.w.len()
    }

    pub fn model(&self) -> Result<ModelSpec, ModelError> {
        let k = self.k();
        let extra = self.extra_mu.len();
        let n = k + extra;
        let unit = |i: usize, v: f64| -> Vec<f64> { (0..k).map(|j| if j == i { v } else { 0.0 }).collect() };
        let mut mu_rows = Vec::with_capacity(n);
        let mut sig_rows = Vec::with_capacity(n);
        let mut mu_off = vec![0.0; n];
        let mut sig_off = vec![0.0; n];
        for i in 0..k {
            mu_rows.push(unit(i, self.sharpe_loading[i] * self.variance_scale[i]));
            sig_rows.push(unit(i, self.variance_scale[i]));
        }
        for j in 0..extra {
            mu_rows.push(vec![0.0; k]);
            sig_rows.push(vec![0.0; k]);
            mu_off[k + j] = self.extra_mu[j];
            sig_off[k + j] = self.extra_sigma[j] * self.extra_sigma[j];
        }
        let sp = self.p.sqrt();
        let rho = (0..n).map(|i| (0..k).map(|j| if i == j { sp } else { 0.0 }).collect()).collect();
        let mt: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| self.m[j][i]).collect()).collect();
        let spec = ModelSpec {
            n,
            k,
            d_w: n,
            d_b: k,
            d_wperp: k,
            mu: VectorFn::Affine { matrix: mu_rows, offset: mu_off },
            sigma: MatrixFn::DiagonalSqrt { slopes: sig_rows, offsets: sig_off },
            alpha: VectorFn::Affine { matrix: mt, offset: self.w.clone() },
            kappa: MatrixFn::DiagonalSqrt { slopes: (0..k).map(|i| unit(i, self.l[i])).collect(), offsets: vec![0.0; k] },
            rho,
            domain: Domain::positive_orthant(k),
        };
        spec.check()?;
        Ok(spec)
    }

    /// Exact affine coefficients for risk parameters `rp` (whose `p` should match).
    pub fn affine_spec(&self, rp: &RiskParams, h: Vec<f64>, h0: f64) -> AffineSpec {
        let k = self.k();
        let sp = self.p.sqrt();
        let lambda: Vec<f64> = (0..k).map(|i| self.sharpe_loading[i].powi(2) * self.variance_scale[i]).collect();
        let lambda0 = self.extra_mu.iter().zip(&self.extra_sigma).map(|(m, s)| (m / s).powi(2)).sum();
        let n = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        if i == j {
                            rp.big_gamma() * sp * self.sharpe_loading[i] * (self.l[i] * self.variance_scale[i]).sqrt()
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        AffineSpec {
            m: self.m.clone(),
            w: self.w.clone(),
            l: self.l.clone(),
            lambda,
            lambda0,
            n,
            c: vec![0.0; k],
            h,
            h0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_spec(mn: f64, l: f64, lambda: f64, lambda0: f64, h: f64) -> AffineSpec {
        AffineSpec {
            m: vec![vec![mn]],
            w: vec![0.0],
            l: vec![l],
            lambda: vec![lambda],
            lambda0,
            n: vec![vec![0.0]],
            c: vec![0.0],
            h: vec![h],
            h0: 0.0,
        }
    }

    #[test]
    fn equilibrium_when_lambda_and_h_vanish() {
        let spec = scalar_spec(-0.5, 1.0, 0.0, 0.3, 0.0);
        let rp = RiskParams::new(2.0, 0.25).unwrap();
        let sol = solve_riccati_numeric(&spec, &rp, 1.0, Direction::Forward).unwrap();
        for t in [0.0, 0.3, 1.0] {
            assert!(sol.phi(t)[0].abs() < 1e-14);
            let expected = -rp.potential_scale() * 0.3 * t;
            assert!((sol.theta(t) - expected).abs() < 1e-11, "{} vs {}", sol.theta(t), expected);
        }
    }

    #[test]
    fn discriminant_and_roots_for_gamma_two() {
        // γ=2, p=0 ⇒ Γ=−½, q=1; L=1, M+N=0, Λ=1 ⇒ D=½, z± = ±√½.
        let spec = scalar_spec(0.0, 1.0, 1.0, 0.0, 0.0);
        let rp = RiskParams::new(2.0, 0.0).unwrap();
        let sol = solve_riccati_closed_form(&spec, &rp, 1.0, Direction::Forward).unwrap();
        let c = &sol.components().unwrap()[0];
        assert!((c.d - 0.5).abs() < 1e-15);
        assert!((c.z_plus - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((c.z_minus + 0.5f64.sqrt()).abs() < 1e-15);
        let num = solve_riccati_numeric(&spec, &rp, 1.0, Direction::Forward).unwrap();
        for j in 0..=100 {
            let t = j as f64 / 100.0;
            assert!((sol.phi(t)[0] - num.phi(t)[0]).abs() < 1e-8);
        }
    }

    #[test]
    fn fixed_point_start() {
        let rp = RiskParams::new(2.0, 0.0).unwrap();
        let zp = 0.5f64.sqrt();
        let spec = scalar_spec(0.0, 1.0, 1.0, 0.0, zp);
        let sol = solve_riccati_closed_form(&spec, &rp, 1.0, Direction::Forward).unwrap();
        let c = &sol.components().unwrap()[0];
        assert!(c.chi.abs() < 1e-15);
        assert!((sol.phi(0.7)[0] - zp).abs() < 1e-15);
    }

    #[test]
    fn gamma_above_one_gives_positive_discriminant() {
        for gamma in [1.2, 2.0, 5.0] {
            for p in [0.0, 0.5, 1.0] {
                let rp = RiskParams::new(gamma, p).unwrap();
                let spec = scalar_spec(0.3, 0.7, 0.4, 0.0, 0.0);
                let sol = solve_riccati_closed_form(&spec, &rp, 1.0, Direction::Forward).unwrap();
                assert!(sol.components().unwrap()[0].d > 0.0);
            }
        }
    }

    #[test]
    fn closed_form_errors() {
        // γ<1 with small |m|: D < 0.
        let rp = RiskParams::new(0.5, 0.0).unwrap();
        let spec = scalar_spec(0.0, 1.0, 1.0, 0.0, 0.0);
        assert!(matches!(
            solve_riccati_closed_form(&spec, &rp, 1.0, Direction::Forward),
            Err(AffineError::InapplicableClosedForm(_))
        ));
        // H = z₋ exactly.
        let rp = RiskParams::new(2.0, 0.0).unwrap();
        let spec = scalar_spec(0.0, 1.0, 1.0, 0.0, -(0.5f64.sqrt()));
        let sol = solve_riccati_closed_form(&spec, &rp, 1.0, Direction::Forward);
        assert!(matches!(sol, Err(AffineError::DegenerateChi { .. })), "{sol:?}");
        // Non-diagonal.
        let mut spec = scalar_spec(0.0, 1.0, 1.0, 0.0, 0.0);
        spec.m = vec![vec![-1.0, 0.2], vec![0.1, -1.0]];
        spec.n = vec![vec![0.0; 2]; 2];
        spec.w = vec![0.0; 2];
        spec.l = vec![1.0; 2];
        spec.lambda = vec![1.0; 2];
        spec.c = vec![0.0; 2];
        spec.h = vec![0.0; 2];
        assert!(matches!(
            solve_riccati_closed_form(&spec, &rp, 1.0, Direction::Forward),
            Err(AffineError::InapplicableClosedForm(_))
        ));
        assert_eq!(solve_riccati(&spec, &rp, 1.0, Direction::Forward).unwrap().method, Method::Numeric);
    }

    #[test]
    fn blow_up_reported_by_both_routes() {
        // Forward below z₋ explodes to −∞.
        let rp = RiskParams::new(2.0, 0.0).unwrap();
        let spec = scalar_spec(0.0, 1.0, 1.0, 0.0, -3.0);
        let cf = solve_riccati_closed_form(&spec, &rp, 5.0, Direction::Forward);
        let num = solve_riccati_numeric(&spec, &rp, 5.0, Direction::Forward);
        match (cf, num) {
            (Err(AffineError::BlowUp { time: t1, .. }), Err(AffineError::BlowUp { time: t2, .. })) => {
                assert!(t1 > 0.0 && t1 < 5.0);
                assert!((t1 - t2).abs() < 1e-6, "{t1} vs {t2}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn diagonal_system_decouples() {
        let rp = RiskParams::new(2.0, 0.25).unwrap();
        let mut spec = scalar_spec(0.0, 1.0, 1.0, 0.1, 0.0);
        spec.m = vec![vec![-0.8, 0.0], vec![0.0, -1.5]];
        spec.n = vec![vec![0.1, 0.0], vec![0.0, -0.2]];
        spec.w = vec![0.2, 0.1];
        spec.l = vec![0.5, 1.2];
        spec.lambda = vec![1.0, 0.3];
        spec.c = vec![0.0; 2];
        spec.h = vec![0.2, -0.1];
        let joint = solve_riccati_numeric(&spec, &rp, 1.0, Direction::Forward).unwrap();
        for i in 0..2 {
            let single = AffineSpec {
                m: vec![vec![spec.m[i][i]]],
                w: vec![spec.w[i]],
                l: vec![spec.l[i]],
                lambda: vec![spec.lambda[i]],
                lambda0: 0.0,
                n: vec![vec![spec.n[i][i]]],
                c: vec![0.0],
                h: vec![spec.h[i]],
                h0: 0.0,
            };
            let s = solve_riccati_numeric(&single, &rp, 1.0, Direction::Forward).unwrap();
            for j in 0..=20 {
                let t = j as f64 / 20.0;
                assert!((joint.phi(t)[i] - s.phi(t)[0]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn residuals_small_for_both_methods_and_directions() {
        let rp = RiskParams::new(2.0, 0.25).unwrap();
        let mut spec = scalar_spec(-0.7, 0.8, 1.3, 0.2, 0.1);
        spec.w = vec![0.3];
        spec.c = vec![0.05];
        for dir in [Direction::Forward, Direction::Backward] {
            let cf = solve_riccati_closed_form(&spec, &rp, 1.0, dir).unwrap();
            let num = solve_riccati_numeric(&spec, &rp, 1.0, dir).unwrap();
            for sol in [&cf, &num] {
                let (rp_, rt) = sol.max_residuals(100);
                assert!(rp_ < 1e-8, "{dir:?} {:?} phi residual {rp_}", sol.method);
                assert!(rt < 1e-8, "{dir:?} {:?} theta residual {rt}", sol.method);
            }
            let t_a = cf.anchor_time();
            assert!((cf.phi(t_a)[0] - 0.1).abs() < 1e-14);
            assert!((cf.theta(t_a)).abs() < 1e-14);
            for j in 0..=50 {
                let t = j as f64 / 50.0;
                assert!((cf.theta(t) - num.theta(t)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn u_and_fpp_evaluation() {
        let rp = RiskParams::new(2.0, 0.25).unwrap();
        let spec = scalar_spec(0.0, 1.0, 0.0, 0.0, 0.0);
        let sol = solve_riccati(&spec, &rp, 1.0, Direction::Forward).unwrap();
        assert_eq!(evaluate_u_affine(&sol, 0.4, &[2.0]).unwrap(), 1.0);
        assert!((evaluate_fpp(&sol, &rp, 0.4, 1.0, &[2.0]).unwrap() + 4.0).abs() < 1e-14);
        let rp_half = RiskParams::new(0.5, 0.0).unwrap();
        let sol = solve_riccati(&spec, &rp_half, 1.0, Direction::Forward).unwrap();
        assert!((evaluate_fpp(&sol, &rp_half, 0.0, 4.0, &[0.0]).unwrap() - 2.0 * 2f64.sqrt()).abs() < 1e-14);
        assert!(matches!(evaluate_fpp(&sol, &rp_half, 0.0, 0.0, &[0.0]), Err(AffineError::Wealth(_))));
        assert!(matches!(evaluate_u_affine(&sol, 1.5, &[0.0]), Err(AffineError::OutsideHorizon { .. })));
        assert!(matches!(evaluate_u_affine(&sol, 0.5, &[-1.0]), Err(AffineError::OutsideDomain(_))));
    }

    #[test]
    fn boundary_condition_and_overflow() {
        let rp = RiskParams::new(2.0, 0.25).unwrap();
        let mut spec = scalar_spec(-1.0, 1.0, 0.5, 0.0, 0.3);
        spec.h0 = 0.2;
        let sol = solve_riccati(&spec, &rp, 1.0, Direction::Forward).unwrap();
        let y = 1.7;
        assert!((evaluate_u_affine(&sol, 0.0, &[y]).unwrap() - (0.3 * y + 0.2f64).exp()).abs() < 1e-13);
        assert!(matches!(evaluate_u_affine(&sol, 0.0, &[1e4]), Err(AffineError::Overflow(_))));
    }

    #[test]
    fn fpp_increasing_in_wealth() {
        let rp = RiskParams::new(3.0, 0.5).unwrap();
        let spec = scalar_spec(-1.0, 1.0, 0.5, 0.1, 0.0);
        let sol = solve_riccati(&spec, &rp, 1.0, Direction::Forward).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for j in 1..50 {
            let v = evaluate_fpp(&sol, &rp, 0.5, j as f64 * 0.1, &[0.4]).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    fn market() -> SquareRootMarket {
        SquareRootMarket {
            m: vec![vec![-2.0, 0.1], vec![0.0, -1.0]],
            w: vec![0.08, 0.05],
            l: vec![0.09, 0.04],
            variance_scale: vec![1.0, 0.5],
            sharpe_loading: vec![2.0, 1.0],
            p: 0.25,
            extra_mu: vec![0.2],
            extra_sigma: vec![2.0],
        }
    }

    #[test]
    fn from_model_recovers_market_coefficients() {
        let mk = market();
        let rp = RiskParams::new(3.0, 0.25).unwrap();
        let model = mk.model().unwrap();
        let exact = mk.affine_spec(&rp, vec![0.1, 0.0], 0.0);
        let derived = AffineSpec::from_model(&model, &rp, vec![0.1, 0.0], 0.0).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-10);
        assert!(close(&exact.lambda, &derived.lambda));
        assert!((exact.lambda0 - derived.lambda0).abs() < 1e-10);
        assert!(close(&exact.l, &derived.l));
        assert!(close(&exact.w, &derived.w));
        assert!(close(&exact.c, &derived.c));
        for i in 0..2 {
            assert!(close(&exact.m[i], &derived.m[i]));
            assert!(close(&exact.n[i], &derived.n[i]));
        }
    }

    #[test]
    fn from_model_rejects_non_affine() {
        let model = model::constant_model(
            vec![0.1],
            vec![vec![0.2]],
            vec![0.0],
            vec![vec![1.0]],
            vec![vec![0.0]],
        )
        .unwrap();
        let mut model = model;
        model.alpha = VectorFn::Tabulated(model::TensorGrid {
            axes: vec![vec![0.0, 1.0, 2.0, 3.0]],
            values: vec![vec![0.0], vec![1.0], vec![0.0], vec![1.0]],
        });
        let rp = RiskParams::new(2.0, 0.0).unwrap();
        assert!(matches!(AffineSpec::from_model(&model, &rp, vec![0.0], 0.0), Err(AffineError::NotAffine(_))));
    }

    #[test]
    fn portfolio_reduces_to_myopic_when_phi_vanishes() {
        let mk = market();
        let rp = RiskParams::new(3.0, 0.25).unwrap();
        let model = mk.model().unwrap();
        let mut spec = mk.affine_spec(&rp, vec![0.0, 0.0], 0.0);
        spec.lambda = vec![0.0, 0.0];
        let sol = solve_riccati(&spec, &rp, 1.0, Direction::Forward).unwrap();
        let y = [0.04, 0.1];
        let pi = optimal_portfolio_affine(&sol, &model, &rp, 0.5, &y).unwrap();
        let sigma = model.sigma(&y);
        let myopic = (sigma.transpose() * &sigma).lu().solve(&model.mu(&y)).unwrap() / rp.gamma();
        assert!((pi - myopic).amax() < 1e-12);
    }

    #[test]
    fn spec_json_uses_symbol_names() {
        let spec = scalar_spec(-1.0, 1.0, 0.5, 0.1, 0.0);
        let v: serde_json::Value = serde_json::to_value(&spec).unwrap();
        for key in ["M", "w", "L", "Lambda", "lambda0", "N", "c", "H", "h0"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
