//! Univariate penalties `p_λ`, the composite penalty over coefficient blocks and
//! the adaptive construction of per-component penalty levels.

use crate::error::{PlamError, Result};
use crate::spline::gram_norm;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Default SCAD shape.
pub const SCAD_A: f64 = 3.7;
/// Floor applied to preliminary magnitudes before taking reciprocals.
pub const ADAPTIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum PenaltySpec {
    Scad { a: f64 },
    Mcp { gamma: f64 },
    L1,
    Lq { q: f64 },
    Hard,
}

impl Default for PenaltySpec {
    fn default() -> Self {
        PenaltySpec::Scad { a: SCAD_A }
    }
}

impl PenaltySpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PenaltySpec::Scad { a } if !(a > 2.0) => {
                Err(PlamError::InvalidHyperparameter(format!("SCAD needs a > 2, got {a}")))
            }
            PenaltySpec::Mcp { gamma } if !(gamma > 1.0) => {
                Err(PlamError::InvalidHyperparameter(format!("MCP needs gamma > 1, got {gamma}")))
            }
            PenaltySpec::Lq { q } if !(q > 0.0) => {
                Err(PlamError::InvalidHyperparameter(format!("L_q needs q > 0, got {q}")))
            }
            _ => Ok(()),
        }
    }

    /// Whether the local quadratic approximation applies (smooth on `(0, M)`, non-negative slope).
    pub fn supports_lqa(&self) -> bool {
        match *self {
            PenaltySpec::Scad { .. } | PenaltySpec::Mcp { .. } | PenaltySpec::L1 => true,
            PenaltySpec::Lq { q } => q == 1.0,
            PenaltySpec::Hard => false,
        }
    }

    /// `p_λ(θ)` for `θ ≥ 0` (the absolute value is taken).
    pub fn value(&self, theta: f64, lambda: f64) -> f64 {
        let t = theta.abs();
        match *self {
            PenaltySpec::Scad { a } => {
                if t <= lambda {
                    lambda * t
                } else if t <= a * lambda {
                    -(t * t - 2.0 * a * lambda * t + lambda * lambda) / (2.0 * (a - 1.0))
                } else {
                    (a + 1.0) * lambda * lambda / 2.0
                }
            }
            PenaltySpec::Mcp { gamma } => {
                if t <= lambda * gamma {
                    lambda * t - t * t / (2.0 * gamma)
                } else {
                    gamma * lambda * lambda / 2.0
                }
            }
            PenaltySpec::L1 => lambda * t,
            PenaltySpec::Lq { q } => lambda * t.powf(q),
            PenaltySpec::Hard => {
                if t < lambda {
                    lambda * lambda - (t - lambda) * (t - lambda)
                } else {
                    lambda * lambda
                }
            }
        }
    }

    /// `p'_λ(θ)` for `θ > 0`.
    pub fn derivative(&self, theta: f64, lambda: f64) -> Result<f64> {
        let t = theta.abs();
        if t == 0.0 {
            return Err(PlamError::NonDifferentiableAtZero);
        }
        Ok(self.derivative_unchecked(t, lambda))
    }

    #[inline]
    pub(crate) fn derivative_unchecked(&self, t: f64, lambda: f64) -> f64 {
        match *self {
            PenaltySpec::Scad { a } => {
                if t <= lambda {
                    lambda
                } else if t <= a * lambda {
                    (a * lambda - t) / (a - 1.0)
                } else {
                    0.0
                }
            }
            PenaltySpec::Mcp { gamma } => {
                if t <= lambda * gamma {
                    lambda - t / gamma
                } else {
                    0.0
                }
            }
            PenaltySpec::L1 => lambda,
            PenaltySpec::Lq { q } => lambda * q * t.powf(q - 1.0),
            PenaltySpec::Hard => {
                if t < lambda {
                    2.0 * (lambda - t)
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn penalty_value(theta: f64, lambda: f64, spec: &PenaltySpec) -> Result<f64> {
    spec.validate()?;
    Ok(spec.value(theta, lambda))
}

pub fn penalty_derivative(theta: f64, lambda: f64, spec: &PenaltySpec) -> Result<f64> {
    spec.validate()?;
    spec.derivative(theta, lambda)
}

/// Symmetric quadratic `q(t) = a + b t²` touching `p_λ(|t|)` at an anchor `t0 ≠ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalQuadratic {
    pub a: f64,
    pub b: f64,
}

impl LocalQuadratic {
    pub fn at(t0: f64, lambda: f64, spec: &PenaltySpec) -> Result<Self> {
        let m = t0.abs();
        let slope = spec.derivative(m, lambda)?;
        let b = slope / (2.0 * m);
        Ok(LocalQuadratic { a: spec.value(m, lambda) - b * m * m, b })
    }

    pub fn value(&self, t: f64) -> f64 {
        self.a + self.b * t * t
    }

    pub fn derivative(&self, t: f64) -> f64 {
        2.0 * self.b * t
    }
}

/// Per-component penalty levels: one per linear coefficient and one per additive block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaVector {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
}

impl LambdaVector {
    pub fn zeros(q: usize, p: usize) -> Self {
        LambdaVector { lambda1: vec![0.0; q], lambda2: vec![0.0; p] }
    }

    pub fn constant(q: usize, p: usize, l1: f64, l2: f64) -> Self {
        LambdaVector { lambda1: vec![l1; q], lambda2: vec![l2; p] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda1.iter().chain(&self.lambda2).any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(PlamError::InvalidHyperparameter("penalty levels must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `J(b, d) = Σ_s p_{λ1,s}(|b_s|) + Σ_j p_{λ2,j}(‖d_j‖_{H_j})`.
pub fn composite_penalty(
    b: &[f64],
    d: &[Vec<f64>],
    lambdas: &LambdaVector,
    grams: &[&DMatrix<f64>],
    spec: &PenaltySpec,
) -> Result<f64> {
    if b.len() != lambdas.lambda1.len() || d.len() != lambdas.lambda2.len() || d.len() != grams.len() {
        return Err(PlamError::DimensionMismatch(format!(
            "{} linear / {} additive coefficients against {} / {} penalty levels and {} Gram matrices",
            b.len(),
            d.len(),
            lambdas.lambda1.len(),
            lambdas.lambda2.len(),
            grams.len()
        )));
    }
    let mut total = 0.0;
    for (bs, &l) in b.iter().zip(&lambdas.lambda1) {
        total += spec.value(bs.abs(), l);
    }
    for ((dj, h), &l) in d.iter().zip(grams).zip(&lambdas.lambda2) {
        if dj.len() != h.nrows() {
            return Err(PlamError::DimensionMismatch(format!(
                "block of length {} against a {}x{} Gram matrix",
                dj.len(),
                h.nrows(),
                h.ncols()
            )));
        }
        total += spec.value(gram_norm(h, dj), l);
    }
    Ok(total)
}

/// Adaptive levels `λ1,s = λ̃1/|β̃_s|`, `λ2,j = λ̃2/‖c̃_j‖_{H_j}`, with magnitudes floored at [`ADAPTIVE_FLOOR`].
pub fn adaptive_lambdas(
    tilde1: f64,
    tilde2: f64,
    beta_init: &[f64],
    d_init: &[Vec<f64>],
    grams: &[&DMatrix<f64>],
) -> LambdaVector {
    let lambda1 = beta_init.iter().map(|b| tilde1 / b.abs().max(ADAPTIVE_FLOOR)).collect();
    let lambda2 = d_init.iter().zip(grams).map(|(d, h)| tilde2 / gram_norm(h, d).max(ADAPTIVE_FLOOR)).collect();
    LambdaVector { lambda1, lambda2 }
}
