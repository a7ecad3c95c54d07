//! Small dense helpers shared by the fitting code.

use nalgebra::{DMatrix, DVector};

use crate::error::{PlamError, Result};

/// `Σ_i w_i x_i x_iᵀ` and `Σ_i w_i x_i y_i` over the rows of `x`, restricted to `cols`.
///
/// Weights must be non-negative. The product goes through a blocked matrix multiply,
/// which is where most of the fitting time is spent.
pub fn weighted_normal_equations(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    weights: &[f64],
    cols: &[usize],
) -> (DMatrix<f64>, DVector<f64>) {
    let n = x.nrows();
    let m = cols.len();
    let mut xs = DMatrix::<f64>::zeros(n, m);
    let sw: Vec<f64> = weights.iter().map(|w| w.max(0.0).sqrt()).collect();
    for (a, &c) in cols.iter().enumerate() {
        let src = x.column(c);
        let mut dst = xs.column_mut(a);
        for i in 0..n {
            dst[i] = src[i] * sw[i];
        }
    }
    let ys = DVector::from_iterator(n, (0..n).map(|i| y[i] * sw[i]));
    let xt = xs.transpose();
    let gram = &xt * &xs;
    let rhs = &xt * &ys;
    (gram, rhs)
}

/// Solves `a x = b` for a symmetric positive semidefinite `a`.
///
/// A ridge of `ridge_floor * trace / dim` is added before the Cholesky factorization and
/// raised tenfold on failure. Two refinement sweeps against the unridged matrix then remove
/// the bias the ridge introduces when `a` is well conditioned.
pub fn solve_spd_ridged(a: &DMatrix<f64>, b: &DVector<f64>, ridge_floor: f64) -> Result<DVector<f64>> {
    let dim = a.nrows();
    if dim == 0 {
        return Ok(DVector::zeros(0));
    }
    let trace = a.trace();
    if !trace.is_finite() || b.iter().any(|v| !v.is_finite()) {
        return Err(PlamError::SingularSystem("non-finite entries".into()));
    }
    let scale = if trace > 0.0 { trace / dim as f64 } else { 1.0 };
    let mut ridge = ridge_floor * scale;
    for _ in 0..12 {
        let mut ar = a.clone();
        for i in 0..dim {
            ar[(i, i)] += ridge;
        }
        if let Some(ch) = ar.cholesky() {
            let mut x = ch.solve(b);
            for _ in 0..2 {
                let resid = b - a * &x;
                x += ch.solve(&resid);
            }
            if x.iter().all(|v| v.is_finite()) {
                return Ok(x);
            }
        }
        ridge = if ridge > 0.0 { ridge * 10.0 } else { 1e-12 * scale };
    }
    Err(PlamError::SingularSystem(format!("matrix of dimension {dim} is not positive definite")))
}

/// Exact solve of a square system by partial-pivot LU; `None` when numerically singular.
pub fn solve_square(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = a.lu();
    let x = lu.solve(b)?;
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Least squares by column-pivoted QR: robust to mild collinearity, used where accuracy matters.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let m = x.ncols();
    if x.nrows() < m {
        return Err(PlamError::SingularDesign(format!("{} rows for {} columns", x.nrows(), m)));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let qty = qr.q().transpose() * y;
    let rmax = (0..m).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..m).any(|i| r[(i, i)].abs() <= 1e-12 * rmax.max(f64::MIN_POSITIVE)) {
        return Err(PlamError::SingularDesign("rank deficient design".into()));
    }
    r.solve_upper_triangular(&qty).ok_or_else(|| PlamError::SingularDesign("rank deficient design".into()))
}
