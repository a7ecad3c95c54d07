//! Datasets, the linearized spline design, fitted models and the preliminary MM fit.

use std::io::Read;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{PlamError, Result};
use crate::linalg::{least_squares, solve_spd_ridged, solve_square, weighted_normal_equations};
use crate::loss::{s_scale, LossSpec, ScaleSpec};
use crate::penalty::LambdaVector;
use crate::spline::{CenteredSplineBasis, KnotPlacement, KnotVector};

/// Responses with linear covariates `z` (n×q) and additive covariates `x` (n×p).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: DVector<f64>,
    pub z: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

impl Dataset {
    pub fn new(y: DVector<f64>, z: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if z.nrows() != n || x.nrows() != n {
            return Err(PlamError::DimensionMismatch(format!(
                "{} responses, {} linear rows, {} additive rows",
                n,
                z.nrows(),
                x.nrows()
            )));
        }
        if y.iter().chain(z.iter()).chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(PlamError::Data("non-finite value in the data".into()));
        }
        Ok(Dataset { y, z, x })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn q(&self) -> usize {
        self.z.ncols()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Keeps the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i])),
            z: self.z.select_rows(rows),
            x: self.x.select_rows(rows),
        }
    }

    /// Keeps the given linear and additive columns.
    pub fn select_columns(&self, linear: &[usize], additive: &[usize]) -> Dataset {
        Dataset { y: self.y.clone(), z: self.z.select_columns(linear), x: self.x.select_columns(additive) }
    }

    /// Same covariates, new responses.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Dataset> {
        Dataset::new(y, self.z.clone(), self.x.clone())
    }

    /// Picks named columns out of a table.
    pub fn from_table(table: &Table, response: &str, linear: &[String], additive: &[String]) -> Result<Self> {
        let n = table.nrows();
        let y = DVector::from_vec(table.column(response)?.to_vec());
        let mut z = DMatrix::zeros(n, linear.len());
        for (j, name) in linear.iter().enumerate() {
            z.set_column(j, &DVector::from_column_slice(table.column(name)?));
        }
        let mut x = DMatrix::zeros(n, additive.len());
        for (j, name) in additive.iter().enumerate() {
            x.set_column(j, &DVector::from_column_slice(table.column(name)?));
        }
        Dataset::new(y, z, x)
    }
}

/// Numeric CSV table stored by column.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| PlamError::Data(format!("cannot read header: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut columns = vec![Vec::new(); headers.len()];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| PlamError::Data(format!("row {}: {e}", line + 1)))?;
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    PlamError::Data(format!("row {}, column {}: '{}' is not numeric", line + 1, headers[j], field))
                })?;
                if !v.is_finite() {
                    return Err(PlamError::Data(format!("row {}, column {}: non-finite value", line + 1, headers[j])));
                }
                columns[j].push(v);
            }
        }
        Ok(Table { headers, columns })
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let file =
            std::fs::File::open(path).map_err(|e| PlamError::Data(format!("cannot open {}: {e}", path.display())))?;
        Table::from_reader(std::io::BufReader::new(file))
    }

    pub fn nrows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| PlamError::Data(format!("column '{name}' not found")))
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.columns[self.index_of(name)?])
    }
}

/// How bases are laid out for each additive covariate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisSpec {
    pub order: usize,
    pub placement: KnotPlacement,
    /// Fixed support interval; `None` uses the observed range of each column.
    pub interval: Option<(f64, f64)>,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec { order: 4, placement: KnotPlacement::Uniform, interval: None }
    }
}

/// One centered basis per additive column, with dimension `ks[j]` before centering.
pub fn build_bases(x: &DMatrix<f64>, ks: &[usize], spec: &BasisSpec) -> Result<Vec<CenteredSplineBasis>> {
    if ks.len() != x.ncols() {
        return Err(PlamError::DimensionMismatch(format!(
            "{} basis dimensions for {} additive columns",
            ks.len(),
            x.ncols()
        )));
    }
    (0..x.ncols())
        .map(|j| {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            let (lo, hi) = match spec.interval {
                Some(iv) => iv,
                None => (
                    col.iter().copied().fold(f64::INFINITY, f64::min),
                    col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                ),
            };
            let kv = KnotVector::on_interval(lo, hi, &col, ks[j], spec.order, spec.placement)?;
            Ok(CenteredSplineBasis::new(kv))
        })
        .collect()
}

/// Rows `(z_i, B¹(x_i1), …, Bᵖ(x_ip))` without the intercept column.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub w: DMatrix<f64>,
    pub q: usize,
    pub block_index: Vec<Range<usize>>,
    /// Number of covariate values that fell outside their basis interval and were clamped.
    pub clamped: usize,
}

impl DesignMatrix {
    pub fn ncols(&self) -> usize {
        self.w.ncols()
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    /// Same design with a leading column of ones.
    pub fn with_intercept(&self) -> DMatrix<f64> {
        self.w.clone().insert_column(0, 1.0)
    }
}

pub fn build_design(data: &Dataset, bases: &[CenteredSplineBasis]) -> Result<DesignMatrix> {
    if bases.len() != data.p() {
        return Err(PlamError::DimensionMismatch(format!("{} bases for {} additive columns", bases.len(), data.p())));
    }
    let n = data.n();
    let q = data.q();
    let mut block_index = Vec::with_capacity(bases.len());
    let mut start = q;
    for b in bases {
        block_index.push(start..start + b.dim());
        start += b.dim();
    }
    let mut w = DMatrix::zeros(n, start);
    w.columns_mut(0, q).copy_from(&data.z);
    let mut clamped = 0;
    let mut buf = Vec::new();
    for (j, (b, range)) in bases.iter().zip(&block_index).enumerate() {
        buf.resize(b.dim(), 0.0);
        for i in 0..n {
            if b.eval_clamped_into(data.x[(i, j)], &mut buf) {
                clamped += 1;
            }
            for (c, v) in range.clone().zip(&buf) {
                w[(i, c)] = *v;
            }
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} additive covariate values were clamped to their basis interval");
    }
    Ok(DesignMatrix { w, q, block_index, clamped })
}

/// A fitted model together with how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct PlamFit {
    pub mu: f64,
    pub beta: Vec<f64>,
    pub c_blocks: Vec<Vec<f64>>,
    pub sigma: f64,
    pub bases: Vec<CenteredSplineBasis>,
    pub active_linear: Vec<bool>,
    pub active_additive: Vec<bool>,
    pub loss: LossSpec,
    pub lambdas_used: Option<LambdaVector>,
    /// Global levels `(λ̃1, λ̃2)` when the levels came from the adaptive rule.
    pub tilde_used: Option<(f64, f64)>,
    pub k_used: Vec<usize>,
    /// Penalized objective at the returned coefficients, when a penalized solve produced them.
    pub objective: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl PlamFit {
    pub fn q(&self) -> usize {
        self.beta.len()
    }

    pub fn p(&self) -> usize {
        self.c_blocks.len()
    }

    /// Coefficients `(β, c¹, …, cᵖ)` stacked in design column order.
    pub fn theta(&self) -> DVector<f64> {
        let it = self.beta.iter().chain(self.c_blocks.iter().flatten()).copied();
        DVector::from_iterator(self.beta.len() + self.c_blocks.iter().map(Vec::len).sum::<usize>(), it)
    }

    /// Splits a stacked coefficient vector back into `β` and the blocks.
    pub fn set_theta(&mut self, theta: &DVector<f64>) {
        let q = self.beta.len();
        self.beta.copy_from_slice(&theta.as_slice()[..q]);
        let mut start = q;
        for c in &mut self.c_blocks {
            let len = c.len();
            c.copy_from_slice(&theta.as_slice()[start..start + len]);
            start += len;
        }
    }

    pub fn df(&self) -> (usize, usize) {
        (self.active_linear.iter().filter(|&&a| a).count(), self.active_additive.iter().filter(|&&a| a).count())
    }
}

/// `μ̂ + β̂ᵀz + Σ_j ĉʲᵀBʲ(x_j)`, with `x_j` clamped to the basis interval.
pub fn predict(fit: &PlamFit, z: &[f64], x: &[f64]) -> Result<f64> {
    if z.len() != fit.q() || x.len() != fit.p() {
        return Err(PlamError::DimensionMismatch(format!(
            "point has {} linear and {} additive coordinates, fit has {} and {}",
            z.len(),
            x.len(),
            fit.q(),
            fit.p()
        )));
    }
    let mut value = fit.mu + fit.beta.iter().zip(z).map(|(b, v)| b * v).sum::<f64>();
    let mut buf = Vec::new();
    for (j, (basis, c)) in fit.bases.iter().zip(&fit.c_blocks).enumerate() {
        if !fit.active_additive[j] {
            continue;
        }
        buf.resize(basis.dim(), 0.0);
        basis.eval_clamped_into(x[j], &mut buf);
        value += buf.iter().zip(c).map(|(b, c)| b * c).sum::<f64>();
    }
    Ok(value)
}

/// `η̂_j` on a grid; exact zeros for an inactive component.
pub fn eval_additive(fit: &PlamFit, j: usize, tgrid: &[f64]) -> Vec<f64> {
    if !fit.active_additive[j] {
        return vec![0.0; tgrid.len()];
    }
    let basis = &fit.bases[j];
    let c = &fit.c_blocks[j];
    let mut buf = vec![0.0; basis.dim()];
    tgrid
        .iter()
        .map(|&t| {
            basis.eval_clamped_into(t, &mut buf);
            buf.iter().zip(c).map(|(b, c)| b * c).sum()
        })
        .collect()
}

pub fn predict_dataset(fit: &PlamFit, data: &Dataset) -> Result<DVector<f64>> {
    if data.q() != fit.q() || data.p() != fit.p() {
        return Err(PlamError::DimensionMismatch(format!(
            "data has {} linear and {} additive columns, fit has {} and {}",
            data.q(),
            data.p(),
            fit.q(),
            fit.p()
        )));
    }
    let mut out = DVector::zeros(data.n());
    let mut zi = vec![0.0; data.q()];
    let mut xi = vec![0.0; data.p()];
    for i in 0..data.n() {
        for (s, v) in zi.iter_mut().enumerate() {
            *v = data.z[(i, s)];
        }
        for (j, v) in xi.iter_mut().enumerate() {
            *v = data.x[(i, j)];
        }
        out[i] = predict(fit, &zi, &xi)?;
    }
    Ok(out)
}

pub fn residuals(fit: &PlamFit, data: &Dataset) -> Result<DVector<f64>> {
    Ok(&data.y - predict_dataset(fit, data)?)
}

/// Tuning of the preliminary MM fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrelimOptions {
    /// Random elemental subsamples drawn in the S-stage.
    pub subsamples: usize,
    /// Scale-weighted refinement steps applied to every subsample candidate.
    pub refine_steps: usize,
    /// Candidates refined to convergence after the screening pass.
    pub keep_best: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Use this scale instead of the S-scale; the S-search still supplies the start.
    pub fixed_scale: Option<f64>,
    /// Divide the S-scale by `1 - (1.29 - 6.02/n)·m/n` (m coefficients), which offsets its
    /// downward bias when m/n is not small.
    pub scale_correction: bool,
}

impl Default for PrelimOptions {
    fn default() -> Self {
        PrelimOptions {
            subsamples: 500,
            refine_steps: 2,
            keep_best: 2,
            tol: 1e-8,
            max_iter: 500,
            seed: 0,
            fixed_scale: None,
            scale_correction: false,
        }
    }
}

/// Small-sample correction of a bisquare S-scale with m coefficients from n rows.
pub fn corrected_s_scale(sigma: f64, n: usize, m: usize) -> f64 {
    let n = n as f64;
    sigma / (1.0 - (1.29 - 6.02 / n) * m as f64 / n)
}

const RIDGE_FLOOR: f64 = 1e-10;
const S_FULL_REFINE_MAX: usize = 50;

fn weighted_fit(x: &DMatrix<f64>, y: &DVector<f64>, weights: &[f64], cols: &[usize]) -> Result<DVector<f64>> {
    if !weights.iter().any(|&w| w > 0.0) {
        return Err(PlamError::SingularSystem("all observation weights are zero".into()));
    }
    let (g, r) = weighted_normal_equations(x, y, weights, cols);
    solve_spd_ridged(&g, &r, RIDGE_FLOOR)
}

/// One fast-S step: reweight by `ρ0` at the current M-scale and refit.
fn s_refine(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    theta: &DVector<f64>,
    scale: &ScaleSpec,
    cols: &[usize],
) -> Option<(DVector<f64>, f64)> {
    let r = y - x * theta;
    let sigma = s_scale(r.as_slice(), scale).ok()?;
    let w: Vec<f64> = r.iter().map(|&v| scale.rho0.weight(v / sigma)).collect();
    let next = weighted_fit(x, y, &w, cols).ok()?;
    let rn = y - x * &next;
    let sn = s_scale(rn.as_slice(), scale).ok()?;
    if sn <= sigma {
        Some((next, sn))
    } else {
        Some((theta.clone(), sigma))
    }
}

/// S-estimate of the coefficients and scale for the full design `x` (intercept included).
fn s_estimate(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    scale: &ScaleSpec,
    opts: &PrelimOptions,
) -> Result<(DVector<f64>, f64)> {
    let (n, m) = x.shape();
    let cols: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    // (scale, candidate index, coefficients), kept sorted by scale then index
    let mut best: Vec<(f64, usize, DVector<f64>)> = Vec::new();
    let keep = opts.keep_best.max(1);
    let offer = |sigma: f64, idx: usize, theta: DVector<f64>, best: &mut Vec<(f64, usize, DVector<f64>)>| {
        if !sigma.is_finite() {
            return;
        }
        let pos = best.partition_point(|(s, i, _)| (*s, *i) < (sigma, idx));
        if pos < keep {
            best.insert(pos, (sigma, idx, theta));
            best.truncate(keep);
        }
    };

    let screen = |theta: DVector<f64>| -> Option<(DVector<f64>, f64)> {
        let mut cur = theta;
        let r = y - x * &cur;
        let mut sigma = s_scale(r.as_slice(), scale).ok()?;
        for _ in 0..opts.refine_steps {
            match s_refine(x, y, &cur, scale, &cols) {
                Some((t, s)) => {
                    cur = t;
                    sigma = s;
                }
                None => break,
            }
        }
        Some((cur, sigma))
    };

    // candidate 0: least squares on all rows
    if let Ok(theta) = least_squares(x, y) {
        if let Some((t, s)) = screen(theta) {
            offer(s, 0, t, &mut best);
        }
    }
    let mut drawn = 0;
    let mut accepted = 0;
    while accepted < opts.subsamples && drawn < 3 * opts.subsamples {
        drawn += 1;
        let rows = index::sample(&mut rng, n, m).into_vec();
        let xs = x.select_rows(&rows);
        let ys = DVector::from_iterator(m, rows.iter().map(|&i| y[i]));
        let Some(theta) = solve_square(xs, &ys) else { continue };
        accepted += 1;
        if let Some((t, s)) = screen(theta) {
            offer(s, accepted, t, &mut best);
        }
    }
    if best.is_empty() {
        return Err(PlamError::SingularDesign("no usable subsample candidate".into()));
    }
    let mut winner: Option<(f64, DVector<f64>)> = None;
    for (mut sigma, _, mut theta) in best {
        for _ in 0..S_FULL_REFINE_MAX {
            let Some((t, s)) = s_refine(x, y, &theta, scale, &cols) else { break };
            let done = (sigma - s).abs() <= 1e-10 * sigma;
            theta = t;
            sigma = s;
            if done {
                break;
            }
        }
        if winner.as_ref().is_none_or(|(s, _)| sigma < *s) {
            winner = Some((sigma, theta));
        }
    }
    let (sigma, theta) = winner.unwrap();
    Ok((theta, sigma))
}

/// M-step: IRLS with `loss` weights at a fixed scale. Returns the last iterate, the
/// iteration count and whether the steps settled.
fn m_estimate(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    start: DVector<f64>,
    sigma: f64,
    loss: &LossSpec,
    opts: &PrelimOptions,
) -> Result<(DVector<f64>, usize, bool)> {
    let cols: Vec<usize> = (0..x.ncols()).collect();
    let mut theta = start;
    for it in 1..=opts.max_iter {
        let r = y - x * &theta;
        let w: Vec<f64> = r.iter().map(|&v| loss.weight(v / sigma)).collect();
        let next = weighted_fit(x, y, &w, &cols)?;
        let step = (&next - &theta).norm();
        let size = theta.norm();
        theta = next;
        if step <= opts.tol * size.max(f64::MIN_POSITIVE) || step == 0.0 {
            return Ok((theta, it, true));
        }
    }
    log::warn!("M-step did not settle in {} iterations", opts.max_iter);
    Ok((theta, opts.max_iter, false))
}

/// Unpenalized fit of the intercept, linear and spline coefficients.
///
/// For a Tukey loss this is an MM-estimator: a fast-S search over random elemental subsamples
/// gives the starting coefficients and the scale `σ̂`, then IRLS at fixed `σ̂` finishes.
/// For squared loss it is ordinary least squares and `σ̂` is set to 1.
pub fn preliminary_fit(
    data: &Dataset,
    bases: &[CenteredSplineBasis],
    loss: &LossSpec,
    scale: &ScaleSpec,
    opts: &PrelimOptions,
) -> Result<PlamFit> {
    let design = build_design(data, bases)?;
    preliminary_fit_design(data, &design, bases, loss, scale, opts)
}

/// [`preliminary_fit`] with a design that was already built from `bases`.
pub fn preliminary_fit_design(
    data: &Dataset,
    design: &DesignMatrix,
    bases: &[CenteredSplineBasis],
    loss: &LossSpec,
    scale: &ScaleSpec,
    opts: &PrelimOptions,
) -> Result<PlamFit> {
    let n = data.n();
    let m = design.ncols() + 1;
    if n < 2 * m {
        return Err(PlamError::SingularDesign(format!(
            "{n} observations for {m} coefficients; at least {} are required",
            2 * m
        )));
    }
    let x = design.with_intercept();
    let (theta, sigma, iterations, converged) = match loss {
        LossSpec::Squared => (least_squares(&x, &data.y)?, 1.0, 1, true),
        LossSpec::Tukey { .. } => {
            let (start, s_sigma) = s_estimate(&x, &data.y, scale, opts)?;
            let sigma = match opts.fixed_scale {
                Some(s) => s,
                None if opts.scale_correction => corrected_s_scale(s_sigma, n, m),
                None => s_sigma,
            };
            let (theta, it, ok) = m_estimate(&x, &data.y, start, sigma, loss, opts)?;
            (theta, sigma, it, ok)
        }
    };
    let q = data.q();
    let c_blocks = design.block_index.iter().map(|r| theta.as_slice()[r.start + 1..r.end + 1].to_vec()).collect();
    Ok(PlamFit {
        mu: theta[0],
        beta: theta.as_slice()[1..q + 1].to_vec(),
        c_blocks,
        sigma,
        bases: bases.to_vec(),
        active_linear: vec![true; q],
        active_additive: vec![true; bases.len()],
        loss: *loss,
        lambdas_used: None,
        tilde_used: None,
        k_used: bases.iter().map(|b| b.k()).collect(),
        objective: None,
        iterations,
        converged,
    })
}
