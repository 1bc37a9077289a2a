//! Forward performance processes and Merton value functions for
//! multi-factor market models whose stock/factor correlation satisfies the
//! eigenvalue-equality condition `ρᵀρ = pI`.
//!
//! Under that condition the nonlinear HJB equation linearises through the
//! distortion `V = U(x) u^q`, so the crate works with the linear PDE
//! `∂ₜu + 𝓛u = 0` and offers:
//!
//! * [`model`]: model specification, validation and generator coefficients;
//! * [`eve`]: projection of an estimated `ρ̂` onto the EVE set and selection of `p`;
//! * [`affine`]: closed-form and numeric Riccati solutions for affine models;
//! * [`spectral`]: Widder-type superpositions of positive eigenfunctions;
//! * [`sim`]: Monte Carlo simulation of factors, prices and wealth;
//! * [`verify`]: PDE residuals, distortion round trips and martingale tests.

// `!(v > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod affine;
pub mod cli;
pub mod eve;
pub mod linalg;
pub mod model;
pub mod ode;
pub mod spectral;
pub mod sim;
pub mod verify;

pub use model::{ModelSpec, RiskParams};
