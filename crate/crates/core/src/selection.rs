//! Robust BIC scores and the nested grid search over spline dimensions and penalty levels.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{PlamError, Result};
use crate::loss::{LossSpec, ScaleSpec};
use crate::model::{
    build_bases, build_design, preliminary_fit_design, residuals, BasisSpec, Dataset, PlamFit, PrelimOptions,
};
use crate::penalty::{adaptive_lambdas, LambdaVector, PenaltySpec};
use crate::solver::{fit_from_solution, PenalizedProblem, SolverOptions};

/// Numbers of active linear and additive components.
pub fn count_df(fit: &PlamFit) -> (usize, usize) {
    fit.df()
}

fn log_loss(r: &[f64], sigma: f64, loss: &LossSpec) -> f64 {
    let total: f64 = r.iter().map(|&v| loss.rho(v / sigma)).sum();
    let arg = sigma * sigma * total;
    if arg > 0.0 {
        arg.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// `log(σ̂² Σρ(r_i/σ̂)) + df_c log(n)/n + df_n log(n/K)/(n/K)` from residuals.
///
/// A perfect fit makes the logarithm `-∞`, which then ranks first.
pub fn rbic_lambda_from_residuals(
    r: &[f64],
    sigma: f64,
    loss: &LossSpec,
    df_c: usize,
    df_n: usize,
    big_k: usize,
) -> f64 {
    let n = r.len() as f64;
    let mut score = log_loss(r, sigma, loss) + df_c as f64 * n.ln() / n;
    if df_n > 0 && big_k > 0 {
        let ratio = n / big_k as f64;
        score += df_n as f64 * ratio.ln() / ratio;
    }
    score
}

/// `log(σ̂² Σρ(r_i/σ̂)) + (log(n)/(2n)) Σ k_j` from residuals.
pub fn rbic_k_from_residuals(r: &[f64], sigma: f64, loss: &LossSpec, ks: &[usize]) -> f64 {
    let n = r.len() as f64;
    log_loss(r, sigma, loss) + n.ln() / (2.0 * n) * ks.iter().sum::<usize>() as f64
}

fn total_basis_dim(fit: &PlamFit) -> usize {
    fit.bases.iter().map(|b| b.dim()).sum()
}

pub fn rbic_lambda(fit: &PlamFit, data: &Dataset, sigma: f64, loss: &LossSpec) -> Result<f64> {
    let r = residuals(fit, data)?;
    let (df_c, df_n) = count_df(fit);
    Ok(rbic_lambda_from_residuals(r.as_slice(), sigma, loss, df_c, df_n, total_basis_dim(fit)))
}

pub fn rbic_k(fit: &PlamFit, data: &Dataset, sigma: f64, loss: &LossSpec, ks: &[usize]) -> Result<f64> {
    let r = residuals(fit, data)?;
    Ok(rbic_k_from_residuals(r.as_slice(), sigma, loss, ks))
}

/// Integer ladder `⌈max(n^0.2/2, 4)⌉ ..= ⌊8 + 2n^0.2⌋`, never below the spline order.
pub fn default_k_grid(n: usize, order: usize) -> Vec<usize> {
    let r = (n.max(1) as f64).powf(0.2);
    let lo = ((r / 2.0).max(4.0).ceil() as usize).max(order);
    let hi = (8.0 + 2.0 * r).floor() as usize;
    (lo..=hi.max(lo)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum KGrid {
    /// One dimension shared by every additive component; searched for its first local minimum.
    Ladder(Vec<usize>),
    /// Explicit per-component dimensions; searched for the global minimum.
    Vectors(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LambdaGrid {
    /// Pairs `(λ̃1, λ̃2)` turned into per-component levels by the adaptive rule.
    Adaptive(Vec<(f64, f64)>),
    /// Per-component levels used as given.
    General(Vec<LambdaVector>),
}

impl LambdaGrid {
    pub fn len(&self) -> usize {
        match self {
            LambdaGrid::Adaptive(v) => v.len(),
            LambdaGrid::General(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cartesian product, `λ̃1` varying slowest.
    pub fn adaptive_product(tilde1: &[f64], tilde2: &[f64]) -> Self {
        LambdaGrid::Adaptive(tilde1.iter().flat_map(|&a| tilde2.iter().map(move |&b| (a, b))).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionGrid {
    pub k_grid: KGrid,
    pub lambda_grid: LambdaGrid,
}

impl SelectionGrid {
    pub fn validate(&self, p: usize) -> Result<()> {
        let k_empty = match &self.k_grid {
            KGrid::Ladder(v) => v.is_empty(),
            KGrid::Vectors(v) => v.is_empty() || v.iter().any(|k| k.len() != p),
        };
        if k_empty {
            return Err(PlamError::InvalidConfig("k grid is empty or has vectors of the wrong length".into()));
        }
        if self.lambda_grid.is_empty() {
            return Err(PlamError::InvalidConfig("penalty grid is empty".into()));
        }
        match &self.lambda_grid {
            LambdaGrid::Adaptive(v) => {
                if v.iter().any(|&(a, b)| !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite())) {
                    return Err(PlamError::InvalidHyperparameter(
                        "penalty levels must be finite and non-negative".into(),
                    ));
                }
            }
            LambdaGrid::General(v) => {
                for l in v {
                    l.validate()?;
                }
            }
        }
        Ok(())
    }
}

/// Everything besides the grid that a selection run needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionOptions {
    pub basis: BasisSpec,
    pub loss: LossSpec,
    pub scale: ScaleSpec,
    pub penalty: PenaltySpec,
    pub solver: SolverOptions,
    pub prelim: PrelimOptions,
    /// Reuse the scale of the first spline dimension that fits for every later one, so all
    /// RBIC_k scores share one `σ̂`. Ignored when `prelim.fixed_scale` is already set.
    pub pin_scale: bool,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        SelectionOptions {
            basis: BasisSpec::default(),
            loss: LossSpec::Tukey { c: crate::loss::TUKEY_EFFICIENT_C },
            scale: ScaleSpec::default(),
            penalty: PenaltySpec::default(),
            solver: SolverOptions::default(),
            prelim: PrelimOptions::default(),
            pin_scale: true,
        }
    }
}

/// One row of the per-cell diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRecord {
    pub k: String,
    pub cell: usize,
    pub tilde1: Option<f64>,
    pub tilde2: Option<f64>,
    pub lambda_hash: Option<String>,
    pub rbic_lambda: f64,
    pub df_c: usize,
    pub df_n: usize,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

/// Outer-loop score for one spline dimension.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KRecord {
    pub k: String,
    pub sigma: f64,
    pub rbic_k: f64,
    pub best_cell: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub fit: PlamFit,
    pub cells: Vec<CellRecord>,
    pub k_scores: Vec<KRecord>,
}

fn k_label(ks: &[usize]) -> String {
    if ks.windows(2).all(|w| w[0] == w[1]) {
        ks.first().map_or_else(String::new, |k| k.to_string())
    } else {
        ks.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
    }
}

/// FNV-1a over the bit patterns of all levels, as a short stable tag for diagnostics.
fn lambda_hash(l: &LambdaVector) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in l.lambda1.iter().chain(&l.lambda2) {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    format!("{h:016x}")
}

fn score_key(score: f64) -> f64 {
    if score.is_nan() {
        f64::INFINITY
    } else {
        score
    }
}

struct KOutcome {
    fit: Option<PlamFit>,
    record: KRecord,
    cells: Vec<CellRecord>,
}

fn evaluate_k(data: &Dataset, ks: &[usize], grid: &LambdaGrid, opts: &SelectionOptions) -> KOutcome {
    let label = k_label(ks);
    let failed = |e: PlamError, cells: Vec<CellRecord>| KOutcome {
        fit: None,
        record: KRecord {
            k: label.clone(),
            sigma: f64::NAN,
            rbic_k: f64::INFINITY,
            best_cell: None,
            error: Some(e.to_string()),
        },
        cells,
    };
    let prepared = build_bases(&data.x, ks, &opts.basis).and_then(|bases| {
        let design = build_design(data, &bases)?;
        let init = preliminary_fit_design(data, &design, &bases, &opts.loss, &opts.scale, &opts.prelim)?;
        Ok((design, init))
    });
    let (design, init) = match prepared {
        Ok(v) => v,
        Err(e) => return failed(e, Vec::new()),
    };
    let sigma = init.sigma;
    let grams: Vec<&DMatrix<f64>> = init.bases.iter().map(|b| b.gram()).collect();
    let problem = match PenalizedProblem::new(data, &design, grams.clone(), init.mu, sigma, opts.loss, opts.penalty) {
        Ok(p) => p,
        Err(e) => return failed(e, Vec::new()),
    };
    let theta0 = init.theta();
    let big_k = design.ncols() - design.q;

    let mut cells = Vec::with_capacity(grid.len());
    // (score, total df, cell index) of the current winner
    let mut best: Option<((f64, usize, usize), PlamFit)> = None;
    for cell in 0..grid.len() {
        let (lambdas, tilde) = match grid {
            LambdaGrid::Adaptive(v) => {
                let (t1, t2) = v[cell];
                (adaptive_lambdas(t1, t2, &init.beta, &init.c_blocks, &grams), Some((t1, t2)))
            }
            LambdaGrid::General(v) => (v[cell].clone(), None),
        };
        let mut record = CellRecord {
            k: label.clone(),
            cell,
            tilde1: tilde.map(|t| t.0),
            tilde2: tilde.map(|t| t.1),
            lambda_hash: if tilde.is_none() { Some(lambda_hash(&lambdas)) } else { None },
            rbic_lambda: f64::INFINITY,
            df_c: 0,
            df_n: 0,
            iterations: 0,
            converged: false,
            error: None,
        };
        match problem.solve(&lambdas, &theta0, &opts.solver) {
            Ok(sol) => {
                let r: DVector<f64> = &problem.y_centered - &design.w * &sol.theta;
                let df_c = sol.active_linear.iter().filter(|&&a| a).count();
                let df_n = sol.active_additive.iter().filter(|&&a| a).count();
                let score = score_key(rbic_lambda_from_residuals(r.as_slice(), sigma, &opts.loss, df_c, df_n, big_k));
                record.rbic_lambda = score;
                record.df_c = df_c;
                record.df_n = df_n;
                record.iterations = sol.iterations;
                record.converged = sol.converged;
                let key = (score, df_c + df_n, cell);
                let better =
                    best.as_ref().is_none_or(|(b, _)| key.0 < b.0 || (key.0 == b.0 && (key.1, key.2) < (b.1, b.2)));
                if better && score < f64::INFINITY {
                    let mut fit = fit_from_solution(&init, sigma, &lambdas, &sol);
                    fit.tilde_used = tilde;
                    best = Some((key, fit));
                }
            }
            Err(e) => record.error = Some(e.to_string()),
        }
        cells.push(record);
    }
    let Some((key, fit)) = best else {
        return failed(PlamError::NoConvergence("every penalty cell failed".into()), cells);
    };
    let r: DVector<f64> = &problem.y_centered - &design.w * fit.theta();
    let score = score_key(rbic_k_from_residuals(r.as_slice(), sigma, &opts.loss, ks));
    KOutcome {
        fit: Some(fit),
        record: KRecord { k: label, sigma, rbic_k: score, best_cell: Some(key.2), error: None },
        cells,
    }
}

/// Nested search: for every spline dimension a preliminary fit, then every penalty cell
/// scored by RBIC_λ; the winners are compared by RBIC_k.
///
/// A scalar ladder stops at the first local minimum of RBIC_k (a boundary point counts),
/// and dimensions beyond it are never fitted. Explicit vectors use the global minimum.
/// Failed cells and dimensions score `+∞` and appear in the diagnostics.
pub fn select(data: &Dataset, grid: &SelectionGrid, opts: &SelectionOptions) -> Result<Selection> {
    grid.validate(data.p())?;
    let mut cells = Vec::new();
    let mut k_scores: Vec<KRecord> = Vec::new();
    let mut fits: Vec<Option<PlamFit>> = Vec::new();
    let p = data.p();
    let mut opts = *opts;
    let pin = |record: &KRecord, opts: &mut SelectionOptions| {
        if opts.pin_scale && opts.prelim.fixed_scale.is_none() && record.sigma.is_finite() {
            opts.prelim.fixed_scale = Some(record.sigma);
        }
    };
    let chosen = match &grid.k_grid {
        KGrid::Ladder(ladder) => {
            let mut chosen = None;
            for &k in ladder {
                let out = evaluate_k(data, &vec![k; p], &grid.lambda_grid, &opts);
                pin(&out.record, &mut opts);
                cells.extend(out.cells);
                k_scores.push(out.record);
                fits.push(out.fit);
                let m = k_scores.len();
                if m >= 2 && is_local_min(&k_scores, m - 2) {
                    chosen = Some(m - 2);
                    break;
                }
            }
            if chosen.is_none() {
                let m = k_scores.len();
                chosen = if is_local_min(&k_scores, m - 1) { Some(m - 1) } else { global_min(&k_scores) };
            }
            chosen
        }
        KGrid::Vectors(vectors) => {
            for ks in vectors {
                let out = evaluate_k(data, ks, &grid.lambda_grid, &opts);
                pin(&out.record, &mut opts);
                cells.extend(out.cells);
                k_scores.push(out.record);
                fits.push(out.fit);
            }
            global_min(&k_scores)
        }
    };
    let Some(idx) = chosen else {
        let reason = k_scores.iter().rev().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(PlamError::NoConvergence(format!("no spline dimension produced a fit: {reason}")));
    };
    let fit = fits.swap_remove(idx).expect("chosen dimension has a fit");
    Ok(Selection { fit, cells, k_scores })
}

/// Point `j` of a ladder is a local minimum if it is finite, not above its left neighbour
/// and strictly below its right neighbour; missing neighbours do not count against it.
fn is_local_min(scores: &[KRecord], j: usize) -> bool {
    let s = scores[j].rbic_k;
    if !s.is_finite() && s > 0.0 {
        return false;
    }
    let left_ok = j == 0 || s <= scores[j - 1].rbic_k;
    let right_ok = j + 1 >= scores.len() || s < scores[j + 1].rbic_k;
    left_ok && right_ok
}

fn global_min(scores: &[KRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in scores.iter().enumerate() {
        if r.rbic_k == f64::INFINITY {
            continue;
        }
        if best.is_none_or(|b| r.rbic_k < scores[b].rbic_k) {
            best = Some(i);
        }
    }
    best
}

/// Writes the per-cell diagnostics as CSV, in grid order.
pub fn write_diagnostics<W: Write>(out: W, cells: &[CellRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in cells {
        w.serialize(c).map_err(|e| PlamError::Data(format!("cannot write diagnostics: {e}")))?;
    }
    w.flush().map_err(|e| PlamError::Data(format!("cannot write diagnostics: {e}")))?;
    Ok(())
}
