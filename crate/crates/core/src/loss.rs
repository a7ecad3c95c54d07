//! Bounded ρ-functions, the S-scale and robust standardization.

use crate::error::{PlamError, Result};
use serde::{Deserialize, Serialize};

/// Tuning constant giving 95% efficiency for the bisquare M-step.
pub const TUKEY_EFFICIENT_C: f64 = 4.685;
/// Bisquare constant for a 50% breakdown S-scale consistent at the normal (with b = 0.5).
pub const TUKEY_BREAKDOWN_C: f64 = 1.54764;
/// Normal consistency factor of the MAD.
pub const MAD_CONSISTENCY: f64 = 1.4826;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum LossSpec {
    /// `ρ(t) = min{1 - (1 - (t/c)²)³, 1}`
    Tukey { c: f64 },
    /// `ρ(t) = t²`
    Squared,
}

impl LossSpec {
    pub fn tukey(c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(PlamError::InvalidHyperparameter(format!("tukey constant must be positive, got {c}")));
        }
        Ok(LossSpec::Tukey { c })
    }

    pub fn is_squared(&self) -> bool {
        matches!(self, LossSpec::Squared)
    }

    /// Multiplier on `ρ` inside the penalized objective. It brings the curvature at zero to
    /// that of `t²` (`c²/3` for the bisquare), so one penalty grid means the same amount of
    /// shrinkage for both losses. Criteria built on `log Σρ` are unaffected by it.
    pub fn objective_scale(&self) -> f64 {
        match *self {
            LossSpec::Tukey { c } => c * c / 3.0,
            LossSpec::Squared => 1.0,
        }
    }

    #[inline]
    pub fn rho(&self, t: f64) -> f64 {
        match *self {
            LossSpec::Tukey { c } => {
                let u = (t / c) * (t / c);
                if u >= 1.0 {
                    1.0
                } else {
                    let v = 1.0 - u;
                    1.0 - v * v * v
                }
            }
            LossSpec::Squared => t * t,
        }
    }

    #[inline]
    pub fn psi(&self, t: f64) -> f64 {
        match *self {
            LossSpec::Tukey { c } => {
                let u = (t / c) * (t / c);
                if u >= 1.0 {
                    0.0
                } else {
                    let v = 1.0 - u;
                    6.0 * t / (c * c) * v * v
                }
            }
            LossSpec::Squared => 2.0 * t,
        }
    }

    /// `w(t) = ψ(t)/t`, with its limit at zero.
    #[inline]
    pub fn weight(&self, t: f64) -> f64 {
        match *self {
            LossSpec::Tukey { c } => {
                let u = (t / c) * (t / c);
                if u >= 1.0 {
                    0.0
                } else {
                    let v = 1.0 - u;
                    6.0 / (c * c) * v * v
                }
            }
            LossSpec::Squared => 2.0,
        }
    }
}

pub fn rho(t: f64, spec: &LossSpec) -> f64 {
    spec.rho(t)
}

pub fn psi(t: f64, spec: &LossSpec) -> f64 {
    spec.psi(t)
}

pub fn weight(t: f64, spec: &LossSpec) -> f64 {
    spec.weight(t)
}

/// M-scale equation `(1/n) Σ ρ0(r_i/σ) = b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub rho0: LossSpec,
    pub b: f64,
}

impl Default for ScaleSpec {
    fn default() -> Self {
        ScaleSpec { rho0: LossSpec::Tukey { c: TUKEY_BREAKDOWN_C }, b: 0.5 }
    }
}

const SCALE_REL_TOL: f64 = 1e-9;
const SCALE_MAX_ITER: usize = 200;

/// Solves the M-scale equation by bisection on `log σ`.
pub fn s_scale(r: &[f64], spec: &ScaleSpec) -> Result<f64> {
    let mut abs: Vec<f64> = r.iter().map(|v| v.abs()).collect();
    let max = abs.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(PlamError::AllZeroResiduals);
    }
    if !max.is_finite() {
        return Err(PlamError::NoConvergence("non-finite residuals".into()));
    }
    let mid = abs.len() / 2;
    let (_, med, _) = abs.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
    let mut base = *med;
    if base <= 0.0 {
        base = abs.iter().copied().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min);
    }
    let n = r.len() as f64;
    let excess = |sigma: f64| r.iter().map(|&v| spec.rho0.rho(v / sigma)).sum::<f64>() / n - spec.b;

    let mut lo = (1e-8 * base).ln();
    let mut hi = (10.0 * max).ln();
    if excess(lo.exp()) < 0.0 || excess(hi.exp()) > 0.0 {
        return Err(PlamError::NoConvergence("scale equation has no root in the bracket".into()));
    }
    for _ in 0..SCALE_MAX_ITER {
        let m = 0.5 * (lo + hi);
        if excess(m.exp()) > 0.0 {
            lo = m;
        } else {
            hi = m;
        }
        // relative width of the σ bracket
        if (hi - lo).exp_m1() < SCALE_REL_TOL {
            return Ok((0.5 * (lo + hi)).exp());
        }
    }
    Err(PlamError::NoConvergence(format!("scale bisection exceeded {SCALE_MAX_ITER} iterations")))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Normal-consistent median absolute deviation.
pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    MAD_CONSISTENCY * median(&dev)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub values: Vec<f64>,
    pub center: f64,
    pub scale: f64,
}

/// Median/MAD standardization.
pub fn robust_standardize(x: &[f64]) -> Result<Standardized> {
    if x.is_empty() {
        return Err(PlamError::ZeroMad);
    }
    let center = median(x);
    let scale = mad(x);
    if !(scale > 0.0) {
        return Err(PlamError::ZeroMad);
    }
    Ok(Standardized { values: x.iter().map(|v| (v - center) / scale).collect(), center, scale })
}
