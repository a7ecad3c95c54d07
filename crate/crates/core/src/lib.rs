//! Robust penalized estimation for sparse partially linear additive models.
//!
//! The response is modelled as `y = mu + zᵀβ + Σ_j η_j(x_j) + ε`, with every `η_j`
//! approximated by a centered B-spline expansion. Estimation combines a Tukey bisquare
//! M-loss, an adaptive SCAD penalty on the linear coefficients and on the spline blocks,
//! and an information criterion for tuning.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod penalty;
pub mod selection;
pub mod simulation;
pub mod solver;
pub mod spline;

pub use error::{PlamError, Result};
pub use loss::{LossSpec, ScaleSpec};
pub use model::{Dataset, DesignMatrix, PlamFit};

pub use penalty::{LambdaVector, PenaltySpec};
pub use spline::{CenteredSplineBasis, KnotPlacement, KnotVector};
