//! Projection of estimated correlation matrices onto the eigenvalue-equality
//! (EVE) set `{ rQ : r ∈ [0,1], QᵀQ = I }` and selection of the scalar `p`
//! in `ρᵀρ ≈ pI`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EveError {
    #[error("ρ̂ is {d_w}×{d_b}; projection needs d_W ≥ d_B")]
    Dimension { d_w: usize, d_b: usize },
    #[error("ρ̂ is rank deficient (smallest singular value {smallest:.3e}); Q* is undefined")]
    SingularProjection { smallest: f64 },
    #[error("ρ̂ must be non-empty")]
    Empty,
}

/// Frobenius-nearest EVE matrix `r* Q*`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EveProjection {
    pub r_star: f64,
    pub q_star: DMatrix<f64>,
    pub frobenius_distance: f64,
    /// Unconstrained minimizer `mean(singular values)` before clamping to `[0,1]`.
    pub r_unclamped: f64,
    pub clamped: bool,
}

impl EveProjection {
    pub fn projected(&self) -> DMatrix<f64> {
        &self.q_star * self.r_star
    }
}

/// Singular values of ρ̂ below this count as zero.
pub const PROJECTION_CUTOFF: f64 = 1e-12;

pub fn project_eve(rho_hat: &DMatrix<f64>) -> Result<EveProjection, EveError> {
    let (d_w, d_b) = rho_hat.shape();
    if d_w == 0 || d_b == 0 {
        return Err(EveError::Empty);
    }
    if d_w < d_b {
        return Err(EveError::Dimension { d_w, d_b });
    }
    let gram = rho_hat.transpose() * rho_hat;
    let theta = linalg::sym_eigenvalues(&gram);
    let smallest = theta[0].max(0.0).sqrt();
    if smallest <= PROJECTION_CUTOFF {
        return Err(EveError::SingularProjection { smallest });
    }
    // (ρ̂ᵀρ̂)^{-1/2} from the symmetric eigendecomposition; all eigenvalues are positive here.
    let inv_sqrt = linalg::sym_apply(&gram, |l| 1.0 / l.sqrt());
    let q_star = rho_hat * inv_sqrt;
    let r_unclamped = theta.iter().map(|t| t.max(0.0).sqrt()).sum::<f64>() / d_b as f64;
    let r_star = r_unclamped.clamp(0.0, 1.0);
    let frobenius_distance = linalg::frobenius(&(rho_hat - &q_star * r_star));
    Ok(EveProjection { r_star, q_star, frobenius_distance, r_unclamped, clamped: r_star != r_unclamped })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PNorm {
    Operator,
    Frobenius,
    Trace,
}

impl PNorm {
    pub const ALL: [PNorm; 3] = [PNorm::Operator, PNorm::Frobenius, PNorm::Trace];

    /// `|diag(θ) − pI|` in this norm, for ordered eigenvalues θ of ρ̂ᵀρ̂.
    pub fn distance(self, theta: &[f64], p: f64) -> f64 {
        match self {
            PNorm::Operator => theta.iter().map(|t| (t - p).abs()).fold(0.0, f64::max),
            PNorm::Frobenius => theta.iter().map(|t| (t - p).powi(2)).sum::<f64>().sqrt(),
            PNorm::Trace => theta.iter().map(|t| (t - p).abs()).sum(),
        }
    }
}

impl std::str::FromStr for PNorm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "operator" => Ok(PNorm::Operator),
            "frobenius" => Ok(PNorm::Frobenius),
            "trace" => Ok(PNorm::Trace),
            other => Err(format!("unknown norm `{other}` (expected operator|frobenius|trace)")),
        }
    }
}

/// Ascending eigenvalues `θ₁ ≤ … ≤ θ_{d_B}` of ρ̂ᵀρ̂.
pub fn gram_eigenvalues(rho_hat: &DMatrix<f64>) -> Vec<f64> {
    linalg::sym_eigenvalues(&(rho_hat.transpose() * rho_hat))
}

/// Minimizer of `|ρ̂ᵀρ̂ − pI|` in the given norm.
///
/// For the trace norm with an even number of eigenvalues every `p` between
/// the two central ones is optimal; the midpoint is returned.
pub fn select_p(rho_hat: &DMatrix<f64>, norm: PNorm) -> f64 {
    select_p_from_eigenvalues(&gram_eigenvalues(rho_hat), norm)
}

/// The objective is convex in `p`, so the minimizer over the feasible range
/// `[0, 1]` is the clamped unconstrained one.
pub fn select_p_from_eigenvalues(theta: &[f64], norm: PNorm) -> f64 {
    let m = theta.len();
    let p = match norm {
        PNorm::Operator => 0.5 * (theta[0] + theta[m - 1]),
        PNorm::Frobenius => theta.iter().sum::<f64>() / m as f64,
        PNorm::Trace => {
            if m % 2 == 1 {
                theta[m / 2]
            } else {
                0.5 * (theta[m / 2 - 1] + theta[m / 2])
            }
        }
    };
    p.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn already_eve() {
        let rho = DMatrix::identity(2, 2) * 0.6;
        let pr = project_eve(&rho).unwrap();
        assert!((pr.r_star - 0.6).abs() < 1e-15);
        assert!((&pr.q_star - DMatrix::identity(2, 2)).amax() < 1e-14);
        assert!(pr.frobenius_distance < 1e-14);
    }

    #[test]
    fn diagonal_estimate_averages_singular_values() {
        let rho = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.8, 0.4]));
        let pr = project_eve(&rho).unwrap();
        assert!((pr.r_star - 0.6).abs() < 1e-15);
        assert!((&pr.q_star - DMatrix::identity(2, 2)).amax() < 1e-14);
        let qtq = pr.q_star.transpose() * &pr.q_star;
        assert!((qtq - DMatrix::identity(2, 2)).amax() < 1e-10);
    }

    #[test]
    fn errors() {
        assert_eq!(project_eve(&DMatrix::zeros(2, 3)), Err(EveError::Dimension { d_w: 2, d_b: 3 }));
        let rank1 = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        assert!(matches!(project_eve(&rank1), Err(EveError::SingularProjection { .. })));
    }

    #[test]
    fn clamps_r_above_one() {
        let rho = DMatrix::identity(3, 2) * 1.3;
        let pr = project_eve(&rho).unwrap();
        assert_eq!(pr.r_star, 1.0);
        assert!(pr.clamped);
        assert!((pr.r_unclamped - 1.3).abs() < 1e-14);
    }

    #[test]
    fn select_p_three_norms() {
        let theta = [0.1, 0.2, 0.9];
        assert!((select_p_from_eigenvalues(&theta, PNorm::Operator) - 0.5).abs() < 1e-15);
        assert!((select_p_from_eigenvalues(&theta, PNorm::Frobenius) - 0.4).abs() < 1e-15);
        assert!((select_p_from_eigenvalues(&theta, PNorm::Trace) - 0.2).abs() < 1e-15);
        assert!((select_p_from_eigenvalues(&[0.2, 0.8], PNorm::Trace) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exact_eve_gives_same_p_everywhere() {
        let rho = DMatrix::identity(3, 3) * 0.3f64.sqrt();
        for norm in PNorm::ALL {
            assert!((select_p(&rho, norm) - 0.3).abs() < 1e-14);
        }
    }
}
