//! Market and factor model specifications.
//!
//! A [`ModelSpec`] describes
//!
//! ```text
//! dS^i / S^i = μ_i(Y) dt + Σ_j σ_ji(Y) dW^j
//! dY         = α(Y) dt + κ(Y)ᵀ dB
//! B          = ρᵀ W + Aᵀ W⊥,        A = (I − ρᵀρ)^{1/2}
//! ```
//!
//! on an axis-aligned box `D ⊆ ℝᵏ`. Coefficients are given by named
//! parametric families ([`VectorFn`], [`MatrixFn`]) so that a spec round-trips
//! through JSON.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch in `{field}`: expected {expected}, got {got}")]
    Dimension {
        field: String,
        expected: String,
        got: String,
    },
    #[error("invalid value for `{field}`: {reason}")]
    InvalidField { field: String, reason: String },
    #[error("singular model at y = {y:?}: σ(y) has rank {rank} < n = {n}")]
    Singular { y: Vec<f64>, rank: usize, n: usize },
    #[error("invalid risk parameters: {0}")]
    RiskParams(String),
    #[error("malformed model document: {0}")]
    Parse(String),
}

fn dim_err(field: &str, expected: impl fmt::Display, got: impl fmt::Display) -> ModelError {
    ModelError::Dimension {
        field: field.to_string(),
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

/// Axis-aligned box; `None` bounds are infinite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

impl Domain {
    pub fn whole_space(k: usize) -> Self {
        Domain { lower: vec![None; k], upper: vec![None; k] }
    }

    /// `[0, ∞)ᵏ`, the canonical state space of affine factor models.
    pub fn positive_orthant(k: usize) -> Self {
        Domain { lower: vec![Some(0.0); k], upper: vec![None; k] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        y.iter().enumerate().all(|(i, &v)| {
            self.lower[i].is_none_or(|lo| v >= lo) && self.upper[i].is_none_or(|hi| v <= hi)
        })
    }

    pub fn is_interior(&self, y: &[f64]) -> bool {
        y.iter().enumerate().all(|(i, &v)| {
            self.lower[i].is_none_or(|lo| v > lo) && self.upper[i].is_none_or(|hi| v < hi)
        })
    }

    /// Projects onto the box (full truncation).
    pub fn clamp(&self, y: &mut [f64]) {
        for (i, v) in y.iter_mut().enumerate() {
            if let Some(lo) = self.lower[i] {
                *v = v.max(lo);
            }
            if let Some(hi) = self.upper[i] {
                *v = v.min(hi);
            }
        }
    }

    /// Mirror reflection at the faces; repeated for boxes narrower than the excursion.
    pub fn reflect(&self, y: &mut [f64]) {
        for (i, v) in y.iter_mut().enumerate() {
            for _ in 0..8 {
                match (self.lower[i], self.upper[i]) {
                    (Some(lo), _) if *v < lo => *v = 2.0 * lo - *v,
                    (_, Some(hi)) if *v > hi => *v = 2.0 * hi - *v,
                    _ => break,
                }
            }
            self.clamp_axis(i, v);
        }
    }

    fn clamp_axis(&self, i: usize, v: &mut f64) {
        if let Some(lo) = self.lower[i] {
            *v = v.max(lo);
        }
        if let Some(hi) = self.upper[i] {
            *v = v.min(hi);
        }
    }

    fn check(&self, k: usize) -> Result<(), ModelError> {
        if self.lower.len() != k || self.upper.len() != k {
            return Err(dim_err("domain", format!("{k} bounds per side"), format!("{}/{}", self.lower.len(), self.upper.len())));
        }
        for i in 0..k {
            if let (Some(lo), Some(hi)) = (self.lower[i], self.upper[i]) {
                if lo >= hi {
                    return Err(ModelError::InvalidField {
                        field: "domain".into(),
                        reason: format!("empty interval on axis {i}: [{lo}, {hi}]"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Tensor grid with values at nodes, interpolated multilinearly and held
/// constant outside the grid. Node values are listed with the first axis
/// varying slowest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorGrid {
    pub axes: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl TensorGrid {
    fn check(&self, field: &str, k: usize, len: usize) -> Result<(), ModelError> {
        if self.axes.len() != k {
            return Err(dim_err(field, format!("{k} axes"), self.axes.len()));
        }
        let mut nodes = 1usize;
        for (i, ax) in self.axes.iter().enumerate() {
            if ax.len() < 2 || ax.windows(2).any(|w| w[1] <= w[0]) {
                return Err(ModelError::InvalidField {
                    field: field.into(),
                    reason: format!("axis {i} must be strictly increasing with at least 2 nodes"),
                });
            }
            nodes *= ax.len();
        }
        if self.values.len() != nodes {
            return Err(dim_err(field, format!("{nodes} node values"), self.values.len()));
        }
        if let Some(bad) = self.values.iter().find(|v| v.len() != len) {
            return Err(dim_err(field, format!("{len} entries per node"), bad.len()));
        }
        Ok(())
    }

    fn interpolate(&self, y: &[f64]) -> Vec<f64> {
        let k = self.axes.len();
        let mut lo_idx = vec![0usize; k];
        let mut frac = vec![0.0; k];
        for i in 0..k {
            let ax = &self.axes[i];
            let v = y[i].clamp(ax[0], ax[ax.len() - 1]);
            let j = match ax.partition_point(|&a| a <= v) {
                0 => 0,
                p => (p - 1).min(ax.len() - 2),
            };
            lo_idx[i] = j;
            frac[i] = (v - ax[j]) / (ax[j + 1] - ax[j]);
        }
        let len = self.values[0].len();
        let mut out = vec![0.0; len];
        for corner in 0..(1usize << k) {
            let mut weight = 1.0;
            let mut flat = 0usize;
            for i in 0..k {
                let bit = (corner >> i) & 1;
                weight *= if bit == 1 { frac[i] } else { 1.0 - frac[i] };
                flat = flat * self.axes[i].len() + lo_idx[i] + bit;
            }
            if weight != 0.0 {
                for (o, v) in out.iter_mut().zip(&self.values[flat]) {
                    *o += weight * v;
                }
            }
        }
        out
    }
}

/// Vector-valued coefficient `D → ℝᵐ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum VectorFn {
    Constant { value: Vec<f64> },
    /// `f(y) = matrix · y + offset`, `matrix` given row by row (m × k).
    Affine { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
    Tabulated(TensorGrid),
}

impl VectorFn {
    pub fn len(&self) -> usize {
        match self {
            VectorFn::Constant { value } => value.len(),
            VectorFn::Affine { offset, .. } => offset.len(),
            VectorFn::Tabulated(g) => g.values.first().map_or(0, |v| v.len()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn eval(&self, y: &[f64]) -> DVector<f64> {
        match self {
            VectorFn::Constant { value } => DVector::from_column_slice(value),
            VectorFn::Affine { matrix, offset } => DVector::from_iterator(
                offset.len(),
                matrix.iter().zip(offset).map(|(row, c)| c + row.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()),
            ),
            VectorFn::Tabulated(g) => DVector::from_vec(g.interpolate(y)),
        }
    }

    fn check(&self, field: &str, len: usize, k: usize) -> Result<(), ModelError> {
        if self.len() != len {
            return Err(dim_err(field, len, self.len()));
        }
        match self {
            VectorFn::Constant { .. } => Ok(()),
            VectorFn::Affine { matrix, .. } => {
                if matrix.len() != len || matrix.iter().any(|r| r.len() != k) {
                    return Err(dim_err(field, format!("{len}×{k} matrix"), "ragged or mis-sized matrix"));
                }
                Ok(())
            }
            VectorFn::Tabulated(g) => g.check(field, k, len),
        }
    }
}

/// Matrix-valued coefficient `D → ℝ^{r×c}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MatrixFn {
    /// Constant matrix given row by row.
    Constant { value: Vec<Vec<f64>> },
    /// Square diagonal matrix with entries `√max(0, slopes_i · y + offsets_i)`.
    DiagonalSqrt { slopes: Vec<Vec<f64>>, offsets: Vec<f64> },
    /// `rows × cols` matrix tabulated row-major at each grid node.
    Tabulated { rows: usize, cols: usize, grid: TensorGrid },
}

impl MatrixFn {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            MatrixFn::Constant { value } => (value.len(), value.first().map_or(0, |r| r.len())),
            MatrixFn::DiagonalSqrt { offsets, .. } => (offsets.len(), offsets.len()),
            MatrixFn::Tabulated { rows, cols, .. } => (*rows, *cols),
        }
    }

    pub fn eval(&self, y: &[f64]) -> DMatrix<f64> {
        match self {
            MatrixFn::Constant { value } => linalg::from_rows(value),
            MatrixFn::DiagonalSqrt { slopes, offsets } => {
                let d = DVector::from_iterator(
                    offsets.len(),
                    slopes.iter().zip(offsets).map(|(row, c)| {
                        let v = c + row.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
                        v.max(0.0).sqrt()
                    }),
                );
                DMatrix::from_diagonal(&d)
            }
            MatrixFn::Tabulated { rows, cols, grid } => DMatrix::from_row_slice(*rows, *cols, &grid.interpolate(y)),
        }
    }

    fn check(&self, field: &str, shape: (usize, usize), k: usize) -> Result<(), ModelError> {
        let got = self.shape();
        if got != shape {
            return Err(dim_err(field, format!("{}×{}", shape.0, shape.1), format!("{}×{}", got.0, got.1)));
        }
        match self {
            MatrixFn::Constant { value } => {
                if value.iter().any(|r| r.len() != shape.1) {
                    return Err(dim_err(field, format!("{} columns", shape.1), "ragged rows"));
                }
                Ok(())
            }
            MatrixFn::DiagonalSqrt { slopes, .. } => {
                if slopes.len() != shape.0 || slopes.iter().any(|r| r.len() != k) {
                    return Err(dim_err(field, format!("{}×{k} slopes", shape.0), "mis-sized slopes"));
                }
                Ok(())
            }
            MatrixFn::Tabulated { rows, cols, grid } => grid.check(field, k, rows * cols),
        }
    }
}

/// Market/factor model. Immutable once checked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n: usize,
    pub k: usize,
    pub d_w: usize,
    pub d_b: usize,
    pub d_wperp: usize,
    pub mu: VectorFn,
    pub sigma: MatrixFn,
    pub alpha: VectorFn,
    pub kappa: MatrixFn,
    pub rho: Vec<Vec<f64>>,
    pub domain: Domain,
}

impl ModelSpec {
    /// Checks dimensions, `d_W ≥ n` and that the singular values of ρ lie in `[0, 1]`.
    pub fn check(&self) -> Result<(), ModelError> {
        if self.n == 0 || self.k == 0 || self.d_b == 0 {
            return Err(ModelError::InvalidField { field: "n/k/d_b".into(), reason: "dimensions must be positive".into() });
        }
        if self.d_w < self.n {
            return Err(ModelError::InvalidField {
                field: "d_w".into(),
                reason: format!("d_W = {} must be at least n = {}", self.d_w, self.n),
            });
        }
        if self.d_wperp != self.d_b {
            return Err(dim_err("d_wperp", self.d_b, self.d_wperp));
        }
        self.mu.check("mu", self.n, self.k)?;
        self.sigma.check("sigma", (self.d_w, self.n), self.k)?;
        self.alpha.check("alpha", self.k, self.k)?;
        self.kappa.check("kappa", (self.d_b, self.k), self.k)?;
        if self.rho.len() != self.d_w || self.rho.iter().any(|r| r.len() != self.d_b) {
            return Err(dim_err("rho", format!("{}×{}", self.d_w, self.d_b), "mis-sized matrix"));
        }
        self.domain.check(self.k)?;
        let s_max = linalg::singular_values(&self.rho_matrix()).first().cloned().unwrap_or(0.0);
        if s_max > 1.0 + 1e-12 {
            return Err(ModelError::InvalidField {
                field: "rho".into(),
                reason: format!("largest singular value {s_max} exceeds 1"),
            });
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let spec: ModelSpec = serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        spec.check()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn mu(&self, y: &[f64]) -> DVector<f64> {
        self.mu.eval(y)
    }

    pub fn sigma(&self, y: &[f64]) -> DMatrix<f64> {
        self.sigma.eval(y)
    }

    pub fn alpha(&self, y: &[f64]) -> DVector<f64> {
        self.alpha.eval(y)
    }

    pub fn kappa(&self, y: &[f64]) -> DMatrix<f64> {
        self.kappa.eval(y)
    }

    pub fn rho_matrix(&self) -> DMatrix<f64> {
        linalg::from_rows(&self.rho)
    }

    /// `A = (I − ρᵀρ)^{1/2}` with roundoff eigenvalues clamped at zero.
    pub fn orthogonal_loading(&self) -> DMatrix<f64> {
        let rho = self.rho_matrix();
        let m = DMatrix::identity(self.d_b, self.d_b) - rho.transpose() * &rho;
        linalg::sym_sqrt_psd(&m, 1e-12).expect("checked singular values of rho lie in [0,1]")
    }

    /// Common value `p` of the eigenvalues of ρᵀρ when the model is EVE.
    pub fn eve_p(&self, tol: f64) -> Option<f64> {
        let rho = self.rho_matrix();
        let e = linalg::sym_eigenvalues(&(rho.transpose() * rho));
        let (lo, hi) = (e[0], e[e.len() - 1]);
        (hi - lo <= tol).then(|| (0.5 * (lo + hi)).clamp(0.0, 1.0))
    }
}

/// Sharpe ratio `λ(y) = (σ(y)ᵀ)⁻ μ(y)` with the Moore–Penrose pseudoinverse.
pub fn sharpe_ratio(spec: &ModelSpec, y: &[f64]) -> Result<DVector<f64>, ModelError> {
    let sigma = spec.sigma(y);
    let (pinv, rank) = linalg::pinv(&sigma);
    if rank < spec.n {
        return Err(ModelError::Singular { y: y.to_vec(), rank, n: spec.n });
    }
    Ok(pinv.transpose() * spec.mu(y))
}

/// Sharpe ratio without the rank requirement. Used where σ may degenerate on
/// the boundary of D (e.g. square-root volatility at `y_i = 0`).
pub(crate) fn sharpe_ratio_lenient(spec: &ModelSpec, sigma: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
    if let Some(chol) = (sigma.transpose() * sigma).cholesky() {
        return sigma * chol.solve(&spec.mu(y));
    }
    linalg::pinv(sigma).0.transpose() * spec.mu(y)
}

/// Risk aversion `γ` and EVE scalar `p`, with derived `Γ = (1−γ)/γ` and `q = 1/(1+Γp)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RiskParamsRaw", into = "RiskParamsRaw")]
pub struct RiskParams {
    gamma: f64,
    p: f64,
    big_gamma: f64,
    q: f64,
}

#[derive(Serialize, Deserialize)]
struct RiskParamsRaw {
    gamma: f64,
    p: f64,
}

impl TryFrom<RiskParamsRaw> for RiskParams {
    type Error = ModelError;
    fn try_from(raw: RiskParamsRaw) -> Result<Self, Self::Error> {
        RiskParams::new(raw.gamma, raw.p)
    }
}

impl From<RiskParams> for RiskParamsRaw {
    fn from(rp: RiskParams) -> Self {
        RiskParamsRaw { gamma: rp.gamma, p: rp.p }
    }
}

impl RiskParams {
    pub fn new(gamma: f64, p: f64) -> Result<Self, ModelError> {
        if !(gamma.is_finite() && gamma > 0.0) || gamma == 1.0 {
            return Err(ModelError::RiskParams(format!("gamma must lie in (0,∞)\\{{1}}, got {gamma}")));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(ModelError::RiskParams(format!("p must lie in [0,1], got {p}")));
        }
        let big_gamma = (1.0 - gamma) / gamma;
        let denom = 1.0 + big_gamma * p;
        if denom <= 0.0 {
            return Err(ModelError::RiskParams(format!("1 + Γp = {denom} must be positive")));
        }
        Ok(RiskParams { gamma, p, big_gamma, q: 1.0 / denom })
    }

    /// Uses the EVE scalar of the model's correlation matrix.
    pub fn for_model(gamma: f64, spec: &ModelSpec) -> Result<Self, ModelError> {
        let p = spec.eve_p(1e-10).ok_or_else(|| ModelError::InvalidField {
            field: "rho".into(),
            reason: "ρᵀρ is not a multiple of the identity".into(),
        })?;
        RiskParams::new(gamma, p)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// `Γ = (1 − γ)/γ`.
    pub fn big_gamma(&self) -> f64 {
        self.big_gamma
    }

    /// `q = 1/(1 + Γp)`.
    pub fn q(&self) -> f64 {
        self.q
    }

    /// `Γ/(2q)`, the coefficient of `λᵀλ` in the potential.
    pub fn potential_scale(&self) -> f64 {
        self.big_gamma / (2.0 * self.q)
    }

    /// Wealth factor `γ^γ x^{1−γ}/(1−γ)` of a power-type utility.
    pub fn power_utility(&self, x: f64) -> f64 {
        self.gamma.powf(self.gamma) * x.powf(1.0 - self.gamma) / (1.0 - self.gamma)
    }
}

type CoefFn<T> = Arc<dyn Fn(&[f64]) -> Result<T, ModelError> + Send + Sync>;

/// Coefficients of `𝓛 = ½ tr(a ∇²) + bᵀ∇ + P`.
#[derive(Clone)]
pub struct GeneratorCoefficients {
    k: usize,
    a: CoefFn<DMatrix<f64>>,
    b: CoefFn<DVector<f64>>,
    potential: CoefFn<f64>,
    joint: Option<CoefFn<Triple>>,
}

type Triple = (DMatrix<f64>, DVector<f64>, f64);

impl fmt::Debug for GeneratorCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneratorCoefficients").field("k", &self.k).finish_non_exhaustive()
    }
}

impl GeneratorCoefficients {
    pub fn new(
        k: usize,
        a: impl Fn(&[f64]) -> Result<DMatrix<f64>, ModelError> + Send + Sync + 'static,
        b: impl Fn(&[f64]) -> Result<DVector<f64>, ModelError> + Send + Sync + 'static,
        potential: impl Fn(&[f64]) -> Result<f64, ModelError> + Send + Sync + 'static,
    ) -> Self {
        GeneratorCoefficients { k, a: Arc::new(a), b: Arc::new(b), potential: Arc::new(potential), joint: None }
    }

    /// Adds an evaluator of `(a, b, P)` in one pass, used by [`Self::all`].
    pub fn with_joint(mut self, joint: impl Fn(&[f64]) -> Result<Triple, ModelError> + Send + Sync + 'static) -> Self {
        self.joint = Some(Arc::new(joint));
        self
    }

    /// `(a(y), b(y), P(y))`.
    pub fn all(&self, y: &[f64]) -> Result<Triple, ModelError> {
        match &self.joint {
            Some(f) => f(y),
            None => Ok((self.a(y)?, self.b(y)?, self.potential(y)?)),
        }
    }

    pub fn constant(a: DMatrix<f64>, b: DVector<f64>, potential: f64) -> Self {
        let k = b.len();
        GeneratorCoefficients::new(k, move |_| Ok(a.clone()), move |_| Ok(b.clone()), move |_| Ok(potential))
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn a(&self, y: &[f64]) -> Result<DMatrix<f64>, ModelError> {
        (self.a)(y)
    }

    pub fn b(&self, y: &[f64]) -> Result<DVector<f64>, ModelError> {
        (self.b)(y)
    }

    pub fn potential(&self, y: &[f64]) -> Result<f64, ModelError> {
        (self.potential)(y)
    }

    /// `𝓛 f` at `y` from a value, gradient and Hessian of `f`.
    pub fn apply(&self, y: &[f64], value: f64, grad: &DVector<f64>, hess: &DMatrix<f64>) -> Result<f64, ModelError> {
        let (a, b, p) = self.all(y)?;
        Ok(0.5 * a.component_mul(hess).sum() + b.dot(grad) + p * value)
    }
}

/// λ for the generator: σ may lose rank on the boundary of D (square-root
/// volatility at `yᵢ = 0`), but not in the interior.
fn generator_lambda(spec: &ModelSpec, y: &[f64]) -> Result<DVector<f64>, ModelError> {
    let sigma = spec.sigma(y);
    // Well-conditioned σᵀσ: the normal equations give the pseudoinverse solution.
    if let Some(chol) = (sigma.transpose() * &sigma).cholesky() {
        let d = chol.l_dirty().diagonal();
        let (lo, hi) = (d.min(), d.max());
        if lo > 1e-6 * hi {
            return Ok(&sigma * chol.solve(&spec.mu(y)));
        }
    }
    match sharpe_ratio(spec, y) {
        Err(ModelError::Singular { .. }) if !spec.domain.is_interior(y) => {
            Ok(sharpe_ratio_lenient(spec, &spec.sigma(y), y))
        }
        other => other,
    }
}

/// `a = κᵀκ`, `b = α + Γκᵀρᵀλ` and `P = (Γ/2q) λᵀλ`.
pub fn generator_coefficients(spec: &ModelSpec, rp: &RiskParams) -> Result<GeneratorCoefficients, ModelError> {
    spec.check()?;
    let spec = Arc::new(spec.clone());
    let rho_t = spec.rho_matrix().transpose();
    let big_gamma = rp.big_gamma();
    let scale = rp.potential_scale();
    let s_a = spec.clone();
    let s_b = spec.clone();
    let s_p = spec.clone();
    let rho_joint = rho_t.clone();
    let joint = move |y: &[f64]| {
        let lambda = generator_lambda(&spec, y)?;
        let kappa = spec.kappa(y);
        let b = spec.alpha(y) + (kappa.transpose() * &rho_joint * &lambda) * big_gamma;
        Ok((kappa.transpose() * kappa, b, scale * lambda.norm_squared()))
    };
    Ok(GeneratorCoefficients::new(
        s_a.k,
        move |y| {
            let kappa = s_a.kappa(y);
            Ok(kappa.transpose() * kappa)
        },
        move |y| {
            let lambda = generator_lambda(&s_b, y)?;
            let kappa = s_b.kappa(y);
            Ok(s_b.alpha(y) + (kappa.transpose() * &rho_t * lambda) * big_gamma)
        },
        move |y| {
            let lambda = generator_lambda(&s_p, y)?;
            Ok(scale * lambda.norm_squared())
        },
    )
    .with_joint(joint))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Worst {
    pub value: f64,
    pub at: Vec<f64>,
}

/// Outcome of [`validate`]. Failures are data, not errors.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub rho_singular_values_ok: bool,
    pub rho_singular_value_max: f64,
    /// `‖ρᵀρ − p̄I‖_F` with `p̄` the mean eigenvalue.
    pub eve_residual: f64,
    /// Worst `‖σσ⁻ρ − ρ‖_F` over the grid.
    pub range_condition_ok: bool,
    pub range_residual: Worst,
    /// Points where σ(y) loses column rank.
    pub rank_deficient_points: Vec<Vec<f64>>,
    pub psd_ok: bool,
    /// Interior points only.
    pub ellipticity_ok: bool,
    pub min_eigenvalue_a: Worst,
    pub sup_a: f64,
    pub sup_alpha: f64,
    /// Bounds `|b − α| / |Γ|`.
    pub sup_kappa_rho_lambda: f64,
    /// Bounds `|P| · 2q / |Γ|`.
    pub sup_lambda_sq: f64,
    pub non_finite_points: Vec<Vec<f64>>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.rho_singular_values_ok
            && self.range_condition_ok
            && self.psd_ok
            && self.ellipticity_ok
            && self.rank_deficient_points.is_empty()
            && self.non_finite_points.is_empty()
    }
}

pub const RANGE_TOL: f64 = 1e-10;

/// Grid diagnostics for the standing assumptions on the coefficients.
pub fn validate(spec: &ModelSpec, grid: &[Vec<f64>]) -> ValidationReport {
    let rho = spec.rho_matrix();
    let s = linalg::singular_values(&rho);
    let s_max = s.first().cloned().unwrap_or(0.0);
    let rtr = rho.transpose() * &rho;
    let p_bar = rtr.trace() / spec.d_b as f64;
    let eve_residual = linalg::frobenius(&(&rtr - DMatrix::identity(spec.d_b, spec.d_b) * p_bar));

    let mut range = Worst { value: 0.0, at: vec![] };
    let mut min_eig = Worst { value: f64::INFINITY, at: vec![] };
    let mut psd_ok = true;
    let mut rank_deficient = Vec::new();
    let mut non_finite = Vec::new();
    let (mut sup_a, mut sup_alpha, mut sup_krl, mut sup_l2) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);

    for y in grid {
        let sigma = spec.sigma(y);
        let kappa = spec.kappa(y);
        let alpha = spec.alpha(y);
        let mu = spec.mu(y);
        if sigma.iter().chain(kappa.iter()).chain(alpha.iter()).chain(mu.iter()).any(|v| !v.is_finite()) {
            non_finite.push(y.clone());
            continue;
        }
        let (pinv, rank) = linalg::pinv(&sigma);
        let resid = linalg::frobenius(&(&sigma * &pinv * &rho - &rho));
        if range.at.is_empty() || resid > range.value {
            range = Worst { value: resid, at: y.clone() };
        }
        if rank < spec.n {
            rank_deficient.push(y.clone());
        }
        let a = kappa.transpose() * &kappa;
        let eig = linalg::sym_eigenvalues(&a);
        if eig[0] < -1e-12 {
            psd_ok = false;
        }
        if spec.domain.is_interior(y) && eig[0] < min_eig.value {
            min_eig = Worst { value: eig[0], at: y.clone() };
        }
        sup_a = sup_a.max(a.abs().max());
        sup_alpha = sup_alpha.max(alpha.amax());
        let lambda = pinv.transpose() * mu;
        sup_krl = sup_krl.max((kappa.transpose() * rho.transpose() * &lambda).amax());
        sup_l2 = sup_l2.max(lambda.norm_squared());
    }
    let min_eig_ok = min_eig.at.is_empty() || min_eig.value > 0.0;
    ValidationReport {
        rho_singular_values_ok: s_max <= 1.0 + 1e-12 && s.iter().all(|&v| v >= 0.0),
        rho_singular_value_max: s_max,
        eve_residual,
        range_condition_ok: range.value <= RANGE_TOL,
        range_residual: range,
        rank_deficient_points: rank_deficient,
        psd_ok,
        ellipticity_ok: min_eig_ok,
        min_eigenvalue_a: min_eig,
        sup_a,
        sup_alpha,
        sup_kappa_rho_lambda: sup_krl,
        sup_lambda_sq: sup_l2,
        non_finite_points: non_finite,
    }
}

/// Builds a model with constant coefficients. Handy for tests and examples.
pub fn constant_model(
    mu: Vec<f64>,
    sigma: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    kappa: Vec<Vec<f64>>,
    rho: Vec<Vec<f64>>,
) -> Result<ModelSpec, ModelError> {
    let n = mu.len();
    let k = alpha.len();
    let d_w = sigma.len();
    let d_b = kappa.len();
    let spec = ModelSpec {
        n,
        k,
        d_w,
        d_b,
        d_wperp: d_b,
        mu: VectorFn::Constant { value: mu },
        sigma: MatrixFn::Constant { value: sigma },
        alpha: VectorFn::Constant { value: alpha },
        kappa: MatrixFn::Constant { value: kappa },
        rho,
        domain: Domain::whole_space(k),
    };
    spec.check()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(mu: f64, sigma: f64, kappa: f64, rho: f64) -> ModelSpec {
        constant_model(vec![mu], vec![vec![sigma]], vec![0.0], vec![vec![kappa]], vec![vec![rho]]).unwrap()
    }

    #[test]
    fn sharpe_scalar() {
        let spec = scalar_model(0.06, 0.2, 1.0, 0.0);
        let l = sharpe_ratio(&spec, &[0.0]).unwrap();
        assert!((l[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn sharpe_identity_sigma() {
        let spec = constant_model(
            vec![0.1, 0.2],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.0],
            vec![vec![1.0]],
            vec![vec![0.0], vec![0.0]],
        )
        .unwrap();
        let l = sharpe_ratio(&spec, &[0.0]).unwrap();
        assert_eq!(l.as_slice(), &[0.1, 0.2]);
    }

    #[test]
    fn sharpe_tall_sigma_matches_normal_equations() {
        let sigma = vec![vec![0.3, 0.1], vec![-0.2, 0.4], vec![0.05, 0.25]];
        let mu = vec![0.07, 0.03];
        let spec = constant_model(mu.clone(), sigma.clone(), vec![0.0], vec![vec![1.0]], vec![vec![0.0]; 3]).unwrap();
        let l = sharpe_ratio(&spec, &[0.0]).unwrap();
        let s = linalg::from_rows(&sigma);
        let m = DVector::from_vec(mu);
        let oracle = &s * (s.transpose() * &s).lu().solve(&m).unwrap();
        assert!((&l - oracle).amax() < 1e-12);
        assert!((s.transpose() * l - m).amax() < 1e-12);
    }

    #[test]
    fn sharpe_rank_deficient_names_point() {
        let spec = constant_model(
            vec![0.1, 0.2],
            vec![vec![1.0, 0.0], vec![0.0, 0.0]],
            vec![0.0],
            vec![vec![1.0]],
            vec![vec![0.0], vec![0.0]],
        )
        .unwrap();
        match sharpe_ratio(&spec, &[0.5]) {
            Err(ModelError::Singular { y, rank, n }) => {
                assert_eq!(y, vec![0.5]);
                assert_eq!((rank, n), (1, 2));
            }
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn risk_params_derivations() {
        let rp = RiskParams::new(2.0, 0.0).unwrap();
        assert_eq!(rp.q(), 1.0);
        assert_eq!(rp.big_gamma(), -0.5);
        let rp = RiskParams::new(0.5, 0.25).unwrap();
        assert_eq!(rp.big_gamma(), 1.0);
        assert!((rp.q() - 0.8).abs() < 1e-15);
        assert!(rp.q() > 0.0 && rp.q() <= 1.0);
        assert!(RiskParams::new(1.0, 0.5).is_err());
        assert!(RiskParams::new(2.0, 1.5).is_err());
        assert!(RiskParams::new(-1.0, 0.5).is_err());
    }

    #[test]
    fn generator_scalar_hand_evaluation() {
        // κ=1, α=0, Γ=1 (γ=1/2), ρ=0.5, λ=0.3, p=0.25.
        let spec = scalar_model(0.06, 0.2, 1.0, 0.5);
        let rp = RiskParams::new(0.5, 0.25).unwrap();
        let gen = generator_coefficients(&spec, &rp).unwrap();
        assert!((gen.b(&[0.0]).unwrap()[0] - 0.15).abs() < 1e-14);
        assert!((gen.potential(&[0.0]).unwrap() - 0.05625).abs() < 1e-14);
        assert!((gen.a(&[0.0]).unwrap()[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn generator_rho_zero_keeps_drift() {
        let spec = scalar_model(0.06, 0.2, 0.7, 0.0);
        let rp = RiskParams::new(3.0, 0.0).unwrap();
        let gen = generator_coefficients(&spec, &rp).unwrap();
        assert_eq!(gen.b(&[0.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn potential_nonpositive_for_gamma_above_one() {
        let spec = scalar_model(0.1, 0.3, 1.0, 0.4);
        for gamma in [1.5, 2.0, 7.0] {
            let rp = RiskParams::new(gamma, 0.16).unwrap();
            let gen = generator_coefficients(&spec, &rp).unwrap();
            assert!(gen.potential(&[0.3]).unwrap() <= 0.0);
        }
    }

    #[test]
    fn small_big_gamma_limit() {
        let eps = 1e-8;
        let gamma = 1.0 / (1.0 + eps);
        let spec = scalar_model(0.1, 0.3, 1.0, 0.4);
        let rp = RiskParams::new(gamma, 0.16).unwrap();
        let gen = generator_coefficients(&spec, &rp).unwrap();
        assert!((gen.b(&[0.0]).unwrap()[0] - 0.0).abs() < 1e-6);
        assert!(gen.potential(&[0.0]).unwrap().abs() < 1e-6);
    }

    #[test]
    fn validate_eve_model_passes() {
        let r = 0.5f64.sqrt();
        let spec = constant_model(
            vec![0.05, 0.04],
            vec![vec![0.2, 0.0], vec![0.1, 0.3]],
            vec![0.0, 0.0],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![r, 0.0], vec![0.0, r]],
        )
        .unwrap();
        let grid: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.1, -0.2]).collect();
        let rep = validate(&spec, &grid);
        assert!(rep.all_passed(), "{rep:?}");
        assert!(rep.eve_residual < 1e-12);
        assert_eq!(validate(&spec, &grid), rep);
    }

    #[test]
    fn validate_flags_zero_sigma_column() {
        let spec = constant_model(
            vec![0.05, 0.04],
            vec![vec![0.2, 0.0], vec![0.0, 0.0]],
            vec![0.0],
            vec![vec![1.0]],
            vec![vec![0.0], vec![0.6]],
        )
        .unwrap();
        let rep = validate(&spec, &[vec![0.0]]);
        assert!(!rep.range_condition_ok);
        assert!(!rep.rank_deficient_points.is_empty());
    }

    #[test]
    fn validate_flags_degenerate_ellipticity() {
        let spec = constant_model(
            vec![0.05],
            vec![vec![0.2]],
            vec![0.0, 0.0],
            vec![vec![1.0, 0.0]],
            vec![vec![0.3]],
        )
        .unwrap();
        let rep = validate(&spec, &[vec![0.0, 0.0]]);
        assert!(!rep.ellipticity_ok);
        assert!(rep.min_eigenvalue_a.value.abs() < 1e-15);
    }

    #[test]
    fn tabulated_interpolates_multilinearly() {
        let g = TensorGrid {
            axes: vec![vec![0.0, 1.0], vec![0.0, 2.0]],
            values: vec![vec![0.0], vec![2.0], vec![1.0], vec![3.0]],
        };
        let f = VectorFn::Tabulated(g);
        // f(y1, y2) = y1 + y2.
        assert!((f.eval(&[0.25, 1.0])[0] - 1.25).abs() < 1e-15);
        assert!((f.eval(&[5.0, -1.0])[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_and_field_errors() {
        let spec = scalar_model(0.06, 0.2, 1.0, 0.5);
        let back = ModelSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(back, spec);
        let mut bad = spec.clone();
        bad.rho = vec![vec![1.5]];
        match ModelSpec::from_json(&serde_json::to_string(&bad).unwrap()) {
            Err(ModelError::InvalidField { field, .. }) => assert_eq!(field, "rho"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn domain_policies() {
        let d = Domain::positive_orthant(2);
        let mut y = [-0.3, 1.0];
        d.clone().reflect(&mut y);
        assert_eq!(y, [0.3, 1.0]);
        let mut y = [-0.3, 1.0];
        d.clamp(&mut y);
        assert_eq!(y, [0.0, 1.0]);
        assert!(d.contains(&[0.0, 1.0]) && !d.is_interior(&[0.0, 1.0]));
    }
}
