//! Monte Carlo study: contaminated samples from a sparse partially linear additive model,
//! selection and estimation metrics, oracle fits and aggregation over replications.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{PlamError, Result};
use crate::loss::{LossSpec, ScaleSpec, TUKEY_EFFICIENT_C};
use crate::model::{eval_additive, BasisSpec, Dataset, PlamFit, PrelimOptions};
use crate::penalty::{LambdaVector, PenaltySpec};
use crate::selection::{default_k_grid, select, KGrid, LambdaGrid, SelectionGrid, SelectionOptions};
use crate::solver::SolverOptions;
use crate::spline::KnotPlacement;

pub const BETA_TRUE: [f64; 10] = [3.0, 1.5, 2.0, -1.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
/// Additive components `0..TRUE_ADDITIVE` carry signal; the rest are identically zero.
pub const TRUE_ADDITIVE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Contamination {
    C0,
    C1,
    C2,
    C3,
    C4,
    C5,
    C6,
    C7,
}

impl Contamination {
    pub const ALL: [Contamination; 8] = [
        Contamination::C0,
        Contamination::C1,
        Contamination::C2,
        Contamination::C3,
        Contamination::C4,
        Contamination::C5,
        Contamination::C6,
        Contamination::C7,
    ];

    /// Share of rows whose linear covariates are replaced by high-leverage points.
    pub fn leverage_fraction(self) -> f64 {
        match self {
            Contamination::C6 => 0.05,
            Contamination::C7 => 0.10,
            _ => 0.0,
        }
    }
}

impl fmt::Display for Contamination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Contamination {
    type Err = PlamError;

    fn from_str(s: &str) -> Result<Self> {
        Contamination::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| PlamError::InvalidConfig(format!("unknown contamination scheme '{s}' (expected C0..C7)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ls,
    Rob,
}

impl Method {
    pub fn loss(self) -> LossSpec {
        match self {
            Method::Ls => LossSpec::Squared,
            Method::Rob => LossSpec::Tukey { c: TUKEY_EFFICIENT_C },
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ls => "ls",
            Method::Rob => "rob",
        })
    }
}

impl FromStr for Method {
    type Err = PlamError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ls" => Ok(Method::Ls),
            "rob" => Ok(Method::Rob),
            other => Err(PlamError::InvalidConfig(format!("unknown method '{other}' (expected ls or rob)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub contamination: Contamination,
    pub replications: usize,
    pub seed: u64,
    pub beta_true: Vec<f64>,
    pub p: usize,
    pub sigma_true: f64,
    pub mu_true: f64,
    pub ar_rho: f64,
}

impl SimConfig {
    pub fn new(n: usize, contamination: Contamination, replications: usize, seed: u64) -> Self {
        SimConfig {
            n,
            contamination,
            replications,
            seed,
            beta_true: BETA_TRUE.to_vec(),
            p: 10,
            sigma_true: 1.0,
            mu_true: 0.0,
            ar_rho: 0.5,
        }
    }

    pub fn q(&self) -> usize {
        self.beta_true.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 || self.n < 2 {
            return Err(PlamError::InvalidConfig("need at least one replication and two observations".into()));
        }
        if !(self.ar_rho.abs() < 1.0) || !(self.sigma_true > 0.0) {
            return Err(PlamError::InvalidConfig("need |ar_rho| < 1 and sigma_true > 0".into()));
        }
        Ok(())
    }

    pub fn truth_linear(&self) -> Vec<bool> {
        self.beta_true.iter().map(|&b| b != 0.0).collect()
    }

    pub fn truth_additive(&self) -> Vec<bool> {
        (0..self.p).map(|j| j < TRUE_ADDITIVE).collect()
    }
}

/// `Σ_{kℓ} = ρ^{|k-ℓ|}`.
pub fn ar_covariance(q: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(q, q, |k, l| rho.powi((k as i32 - l as i32).abs()))
}

/// True additive component `j` (0-based) at `x`.
pub fn true_eta(j: usize, x: f64) -> f64 {
    use std::f64::consts::PI;
    match j {
        0 => 5.0 * x - 2.5,
        1 => 3.0 * (2.0 * x - 1.0).powi(2) - 1.0,
        2 => 60.0 * x.powi(3) - 90.0 * x * x + 30.0 * x,
        3 => 2.0 * (PI * x).sin() - 4.0 / PI,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSample {
    pub data: Dataset,
    /// Error draws `u_i` added to the regression function.
    pub errors: DVector<f64>,
    /// Rows whose linear covariates were overwritten (leverage schemes only).
    pub leverage_rows: Vec<usize>,
}

fn replication_rng(seed: u64, rep: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn draw_error(c: Contamination, sigma: f64, rng: &mut ChaCha20Rng) -> f64 {
    let mixture = |rng: &mut ChaCha20Rng, p: f64, mean: f64, sd: f64| {
        let u: f64 = rng.random();
        let e = normal(rng);
        if u < p {
            mean * sigma + sd * sigma * e
        } else {
            sigma * e
        }
    };
    match c {
        Contamination::C1 => {
            let num = normal(rng);
            let chi: f64 = (0..3).map(|_| normal(rng).powi(2)).sum();
            sigma * num / (chi / 3.0).sqrt()
        }
        Contamination::C2 => mixture(rng, 0.10, 0.0, 5.0),
        Contamination::C3 => mixture(rng, 0.05, 0.0, 10.0),
        Contamination::C4 => mixture(rng, 0.05, 15.0, 1.0),
        Contamination::C5 => mixture(rng, 0.15, 15.0, 1.0),
        _ => sigma * normal(rng),
    }
}

/// Replication `rep` of the design: its own ChaCha stream, so any replication can be
/// regenerated alone.
pub fn gen_sample(cfg: &SimConfig, rep: usize) -> SimSample {
    let mut rng = replication_rng(cfg.seed, rep);
    let (n, q, p) = (cfg.n, cfg.q(), cfg.p);
    let chol = ar_covariance(q, cfg.ar_rho).cholesky().expect("AR covariance is positive definite").l();
    let mut z = DMatrix::zeros(n, q);
    let mut e = DVector::zeros(q);
    for i in 0..n {
        for v in e.iter_mut() {
            *v = normal(&mut rng);
        }
        let row = &chol * &e;
        for s in 0..q {
            z[(i, s)] = row[s];
        }
    }
    let x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>());
    let errors = DVector::from_fn(n, |_, _| draw_error(cfg.contamination, cfg.sigma_true, &mut rng));
    let y = DVector::from_fn(n, |i, _| {
        let lin: f64 = (0..q).map(|s| cfg.beta_true[s] * z[(i, s)]).sum();
        let add: f64 = (0..p).map(|j| true_eta(j, x[(i, j)])).sum();
        cfg.mu_true + lin + add + errors[i]
    });
    let count = (cfg.contamination.leverage_fraction() * n as f64).round() as usize;
    let mut leverage_rows = Vec::new();
    if count > 0 {
        leverage_rows = index::sample(&mut rng, n, count).into_vec();
        leverage_rows.sort_unstable();
        for &i in &leverage_rows {
            z.row_mut(i).fill(20.0);
        }
    }
    let data = Dataset { y, z, x };
    SimSample { data, errors, leverage_rows }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PartMetrics {
    /// Zero truths estimated as zero.
    pub c: usize,
    /// Nonzero truths estimated as zero.
    pub ic: usize,
    /// Whether the estimated support equals the true support.
    pub cf: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SelectionMetrics {
    pub linear: PartMetrics,
    pub additive: PartMetrics,
    pub complete: PartMetrics,
}

fn part_metrics(active: &[bool], truth: &[bool]) -> PartMetrics {
    let c = active.iter().zip(truth).filter(|(a, t)| !**a && !**t).count();
    let ic = active.iter().zip(truth).filter(|(a, t)| !**a && **t).count();
    PartMetrics { c, ic, cf: active == truth }
}

pub fn selection_metrics(fit: &PlamFit, truth_linear: &[bool], truth_additive: &[bool]) -> SelectionMetrics {
    let linear = part_metrics(&fit.active_linear, truth_linear);
    let additive = part_metrics(&fit.active_additive, truth_additive);
    let complete = PartMetrics { c: linear.c + additive.c, ic: linear.ic + additive.ic, cf: linear.cf && additive.cf };
    SelectionMetrics { linear, additive, complete }
}

/// `(β̂ − β)ᵀ Σ (β̂ − β)`.
pub fn gmse(beta_hat: &[f64], beta_true: &[f64], sigma_z: &DMatrix<f64>) -> Result<f64> {
    let q = beta_true.len();
    if beta_hat.len() != q || sigma_z.nrows() != q || sigma_z.ncols() != q {
        return Err(PlamError::DimensionMismatch(format!(
            "{} estimates, {} truths, {}x{} covariance",
            beta_hat.len(),
            q,
            sigma_z.nrows(),
            sigma_z.ncols()
        )));
    }
    let d = DVector::from_iterator(q, beta_hat.iter().zip(beta_true).map(|(a, b)| a - b));
    Ok((d.transpose() * sigma_z * &d)[(0, 0)])
}

/// Equispaced grid of `m` points covering `[0, 1]` including both ends.
pub fn unit_grid(m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![0.5];
    }
    (0..m).map(|k| k as f64 / (m - 1) as f64).collect()
}

/// `sqrt((1/m) Σ_j Σ_k (η̂_j(t_k) − η_j(t_k))²)` on `m` equispaced points of `[0, 1]`.
pub fn rase(fit: &PlamFit, m: usize) -> f64 {
    let grid = unit_grid(m);
    let mut total = 0.0;
    for j in 0..fit.p() {
        let est = eval_additive(fit, j, &grid);
        total += est.iter().zip(&grid).map(|(e, &t)| (e - true_eta(j, t)).powi(2)).sum::<f64>();
    }
    (total / m as f64).sqrt()
}

/// `(λ̃1, λ̃2)` grids used in the study for each sample size and method.
pub fn study_lambda_grid(n: usize, method: Method) -> (Vec<f64>, Vec<f64>) {
    let steps = |lo: f64, hi: f64| -> Vec<f64> {
        let count = ((hi - lo) / 0.05).round() as usize;
        (0..=count).map(|i| ((lo + 0.05 * i as f64) * 100.0).round() / 100.0).collect()
    };
    if n <= 200 {
        (steps(0.05, 0.35), steps(0.20, 0.50))
    } else {
        match method {
            Method::Rob => (steps(0.15, 0.35), steps(0.05, 0.25)),
            Method::Ls => (steps(0.05, 0.35), steps(0.05, 0.40)),
        }
    }
}

/// Knobs of a study run besides the data-generating configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyOptions {
    pub methods: Vec<Method>,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    /// Spline dimension ladder; `None` uses the default ladder for `n`.
    pub k_grid: Option<Vec<usize>>,
    /// `(λ̃1, λ̃2)` grids per method; `None` uses [`study_lambda_grid`].
    pub lambda_grid: Option<(Vec<f64>, Vec<f64>)>,
    pub subsamples: usize,
    pub order: usize,
    pub rase_points: usize,
    pub oracle: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            methods: vec![Method::Ls, Method::Rob],
            threads: 0,
            k_grid: None,
            lambda_grid: None,
            subsamples: PrelimOptions::default().subsamples,
            order: 4,
            rase_points: 1000,
            oracle: true,
        }
    }
}

impl StudyOptions {
    fn selection_options(&self, method: Method, seed: u64) -> SelectionOptions {
        SelectionOptions {
            basis: BasisSpec { order: self.order, placement: KnotPlacement::Uniform, interval: Some((0.0, 1.0)) },
            loss: method.loss(),
            scale: ScaleSpec::default(),
            penalty: PenaltySpec::default(),
            solver: SolverOptions::default(),
            pin_scale: true,
            prelim: PrelimOptions { subsamples: self.subsamples, seed, ..Default::default() },
        }
    }

    fn ladder(&self, n: usize) -> Vec<usize> {
        self.k_grid.clone().unwrap_or_else(|| default_k_grid(n, self.order))
    }
}

/// Seed of the S-stage subsampling for one replication and method.
fn prelim_seed(seed: u64, rep: usize, method: Method) -> u64 {
    // splitmix64 finalizer over the combined inputs
    let mut x = seed ^ ((rep as u64) << 1 | (method == Method::Rob) as u64).wrapping_mul(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Penalized selection for one method on one sample.
pub fn penalized_fit(
    data: &Dataset,
    cfg: &SimConfig,
    method: Method,
    opts: &StudyOptions,
    rep: usize,
) -> Result<PlamFit> {
    let (t1, t2) = opts.lambda_grid.clone().unwrap_or_else(|| study_lambda_grid(cfg.n, method));
    let grid = SelectionGrid {
        k_grid: KGrid::Ladder(opts.ladder(cfg.n)),
        lambda_grid: LambdaGrid::adaptive_product(&t1, &t2),
    };
    Ok(select(data, &grid, &opts.selection_options(method, prelim_seed(cfg.seed, rep, method)))?.fit)
}

/// Unpenalized fit that only uses the truly active columns; zeros elsewhere.
pub fn oracle_fit(data: &Dataset, cfg: &SimConfig, method: Method, opts: &StudyOptions, rep: usize) -> Result<PlamFit> {
    let lin: Vec<usize> = (0..cfg.q()).filter(|&s| cfg.beta_true[s] != 0.0).collect();
    let add: Vec<usize> = (0..cfg.p).filter(|&j| j < TRUE_ADDITIVE).collect();
    let sub = data.select_columns(&lin, &add);
    let grid = SelectionGrid {
        k_grid: KGrid::Ladder(opts.ladder(cfg.n)),
        lambda_grid: LambdaGrid::General(vec![LambdaVector::zeros(lin.len(), add.len())]),
    };
    let mut sel_opts = opts.selection_options(method, prelim_seed(cfg.seed, rep, method) ^ 1);
    sel_opts.solver.zero_threshold = 0.0;
    let small = select(&sub, &grid, &sel_opts)?.fit;

    let mut beta = vec![0.0; cfg.q()];
    for (i, &s) in lin.iter().enumerate() {
        beta[s] = small.beta[i];
    }
    let template = small.bases[0].clone();
    let mut bases = vec![template.clone(); cfg.p];
    let mut c_blocks = vec![vec![0.0; template.dim()]; cfg.p];
    let mut active_additive = vec![false; cfg.p];
    for (i, &j) in add.iter().enumerate() {
        bases[j] = small.bases[i].clone();
        c_blocks[j] = small.c_blocks[i].clone();
        active_additive[j] = true;
    }
    Ok(PlamFit {
        beta,
        c_blocks,
        active_linear: cfg.truth_linear(),
        active_additive,
        k_used: bases.iter().map(|b| b.k()).collect(),
        bases,
        lambdas_used: None,
        ..small
    })
}

/// One row per replication and method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRow {
    pub rep: usize,
    pub method: Method,
    pub contamination: Contamination,
    pub n: usize,
    pub k_used: Option<usize>,
    pub tilde1: Option<f64>,
    pub tilde2: Option<f64>,
    pub c_linear: Option<usize>,
    pub ic_linear: Option<usize>,
    pub cf_linear: Option<u8>,
    pub c_additive: Option<usize>,
    pub ic_additive: Option<usize>,
    pub cf_additive: Option<u8>,
    pub c_complete: Option<usize>,
    pub ic_complete: Option<usize>,
    pub cf_complete: Option<u8>,
    pub gmse: Option<f64>,
    pub rase: Option<f64>,
    pub oracle_k: Option<usize>,
    pub oracle_gmse: Option<f64>,
    pub oracle_rase: Option<f64>,
    pub converged: Option<bool>,
    pub error: Option<String>,
}

impl ReplicationRow {
    fn empty(rep: usize, method: Method, cfg: &SimConfig) -> Self {
        ReplicationRow {
            rep,
            method,
            contamination: cfg.contamination,
            n: cfg.n,
            k_used: None,
            tilde1: None,
            tilde2: None,
            c_linear: None,
            ic_linear: None,
            cf_linear: None,
            c_additive: None,
            ic_additive: None,
            cf_additive: None,
            c_complete: None,
            ic_complete: None,
            cf_complete: None,
            gmse: None,
            rase: None,
            oracle_k: None,
            oracle_gmse: None,
            oracle_rase: None,
            converged: None,
            error: None,
        }
    }
}

/// Runs replication `rep` for every requested method.
pub fn run_replication(cfg: &SimConfig, opts: &StudyOptions, rep: usize) -> Vec<ReplicationRow> {
    let sample = gen_sample(cfg, rep);
    let sigma_z = ar_covariance(cfg.q(), cfg.ar_rho);
    let truth_l = cfg.truth_linear();
    let truth_a = cfg.truth_additive();
    opts.methods
        .iter()
        .map(|&method| {
            let mut row = ReplicationRow::empty(rep, method, cfg);
            let mut errors = Vec::new();
            match penalized_fit(&sample.data, cfg, method, opts, rep) {
                Ok(fit) => {
                    let m = selection_metrics(&fit, &truth_l, &truth_a);
                    row.k_used = fit.k_used.first().copied();
                    row.tilde1 = fit.tilde_used.map(|t| t.0);
                    row.tilde2 = fit.tilde_used.map(|t| t.1);
                    row.c_linear = Some(m.linear.c);
                    row.ic_linear = Some(m.linear.ic);
                    row.cf_linear = Some(m.linear.cf as u8);
                    row.c_additive = Some(m.additive.c);
                    row.ic_additive = Some(m.additive.ic);
                    row.cf_additive = Some(m.additive.cf as u8);
                    row.c_complete = Some(m.complete.c);
                    row.ic_complete = Some(m.complete.ic);
                    row.cf_complete = Some(m.complete.cf as u8);
                    row.gmse = gmse(&fit.beta, &cfg.beta_true, &sigma_z).ok();
                    row.rase = Some(rase(&fit, opts.rase_points));
                    row.converged = Some(fit.converged);
                }
                Err(e) => errors.push(format!("penalized: {e}")),
            }
            if opts.oracle {
                match oracle_fit(&sample.data, cfg, method, opts, rep) {
                    Ok(fit) => {
                        row.oracle_k = fit.k_used.first().copied();
                        row.oracle_gmse = gmse(&fit.beta, &cfg.beta_true, &sigma_z).ok();
                        row.oracle_rase = Some(rase(&fit, opts.rase_points));
                    }
                    Err(e) => errors.push(format!("oracle: {e}")),
                }
            }
            if !errors.is_empty() {
                row.error = Some(errors.join("; "));
            }
            row
        })
        .collect()
}

/// Mean and sample standard deviation of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary { mean: f64::NAN, sd: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    Summary { mean, sd }
}

/// Mean after dropping `floor(fraction·n)` values from each end.
pub fn trimmed_mean(values: &[f64], fraction: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let g = (fraction * v.len() as f64).floor() as usize;
    let kept = &v[g..v.len() - g];
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Aggregates for one method and scheme, laid out like the published tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub n: usize,
    pub contamination: Contamination,
    pub method: Method,
    pub replications: usize,
    pub failures: usize,
    pub oracle_failures: usize,
    pub c_linear: f64,
    pub ic_linear: f64,
    pub cf_linear: f64,
    pub c_additive: f64,
    pub ic_additive: f64,
    pub cf_additive: f64,
    pub c_complete: f64,
    pub ic_complete: f64,
    pub cf_complete: f64,
    pub gmse_mean: f64,
    pub gmse_sd: f64,
    pub gmse_trimmed: f64,
    pub rase_mean: f64,
    pub rase_sd: f64,
    pub oracle_gmse_mean: f64,
    pub oracle_gmse_sd: f64,
    pub oracle_gmse_trimmed: f64,
    pub oracle_rase_mean: f64,
    pub oracle_rase_sd: f64,
}

pub fn aggregate(cfg: &SimConfig, method: Method, rows: &[ReplicationRow]) -> AggregateRow {
    let mine: Vec<&ReplicationRow> = rows.iter().filter(|r| r.method == method).collect();
    let ok: Vec<&&ReplicationRow> = mine.iter().filter(|r| r.gmse.is_some()).collect();
    let oracle_ok: Vec<&&ReplicationRow> = mine.iter().filter(|r| r.oracle_gmse.is_some()).collect();
    let collect = |f: &dyn Fn(&ReplicationRow) -> Option<f64>, set: &[&&ReplicationRow]| -> Vec<f64> {
        set.iter().filter_map(|r| f(r)).collect()
    };
    let mean_of = |f: &dyn Fn(&ReplicationRow) -> Option<f64>| summarize(&collect(f, &ok)).mean;
    let gmse = collect(&|r| r.gmse, &ok);
    let rase = collect(&|r| r.rase, &ok);
    let ogmse = collect(&|r| r.oracle_gmse, &oracle_ok);
    let orase = collect(&|r| r.oracle_rase, &oracle_ok);
    let (g, rs, og, ors) = (summarize(&gmse), summarize(&rase), summarize(&ogmse), summarize(&orase));
    AggregateRow {
        n: cfg.n,
        contamination: cfg.contamination,
        method,
        replications: mine.len(),
        failures: mine.len() - ok.len(),
        oracle_failures: if mine
            .iter()
            .any(|r| r.oracle_gmse.is_some() || r.error.as_deref().is_some_and(|e| e.contains("oracle")))
        {
            mine.len() - oracle_ok.len()
        } else {
            0
        },
        c_linear: mean_of(&|r| r.c_linear.map(|v| v as f64)),
        ic_linear: mean_of(&|r| r.ic_linear.map(|v| v as f64)),
        cf_linear: mean_of(&|r| r.cf_linear.map(f64::from)),
        c_additive: mean_of(&|r| r.c_additive.map(|v| v as f64)),
        ic_additive: mean_of(&|r| r.ic_additive.map(|v| v as f64)),
        cf_additive: mean_of(&|r| r.cf_additive.map(f64::from)),
        c_complete: mean_of(&|r| r.c_complete.map(|v| v as f64)),
        ic_complete: mean_of(&|r| r.ic_complete.map(|v| v as f64)),
        cf_complete: mean_of(&|r| r.cf_complete.map(f64::from)),
        gmse_mean: g.mean,
        gmse_sd: g.sd,
        gmse_trimmed: trimmed_mean(&gmse, 0.1),
        rase_mean: rs.mean,
        rase_sd: rs.sd,
        oracle_gmse_mean: og.mean,
        oracle_gmse_sd: og.sd,
        oracle_gmse_trimmed: trimmed_mean(&ogmse, 0.1),
        oracle_rase_mean: ors.mean,
        oracle_rase_sd: ors.sd,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<ReplicationRow>,
    pub aggregates: Vec<AggregateRow>,
}

impl MetricsTable {
    pub fn aggregate_for(&self, method: Method) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.method == method)
    }

    /// Share of replication-method pairs whose penalized fit succeeded.
    pub fn success_rate(&self) -> f64 {
        if self.rows.is_empty() {
            return 1.0;
        }
        self.rows.iter().filter(|r| r.gmse.is_some()).count() as f64 / self.rows.len() as f64
    }
}

/// Runs all replications (in parallel when `threads != 1`) and aggregates per method.
/// Output depends only on the configuration, not on thread count or scheduling.
pub fn run_study(cfg: &SimConfig, opts: &StudyOptions) -> Result<MetricsTable> {
    cfg.validate()?;
    if opts.methods.is_empty() {
        return Err(PlamError::InvalidConfig("no methods requested".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| PlamError::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    let per_rep: Vec<Vec<ReplicationRow>> =
        pool.install(|| (0..cfg.replications).into_par_iter().map(|rep| run_replication(cfg, opts, rep)).collect());
    let rows: Vec<ReplicationRow> = per_rep.into_iter().flatten().collect();
    let aggregates = opts.methods.iter().map(|&m| aggregate(cfg, m, &rows)).collect();
    Ok(MetricsTable { rows, aggregates })
}

fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| PlamError::Data(format!("cannot write CSV: {e}")))?;
    }
    w.flush().map_err(|e| PlamError::Data(format!("cannot write CSV: {e}")))
}

pub fn write_replications<W: Write>(out: W, rows: &[ReplicationRow]) -> Result<()> {
    write_rows(out, rows)
}

pub fn write_aggregates<W: Write>(out: W, rows: &[AggregateRow]) -> Result<()> {
    write_rows(out, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_bases, preliminary_fit};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn fit_with_support(active_linear: Vec<bool>, active_additive: Vec<bool>) -> PlamFit {
        let spec = BasisSpec { order: 4, placement: KnotPlacement::Uniform, interval: Some((0.0, 1.0)) };
        let cfg = SimConfig::new(100, Contamination::C0, 1, 1);
        let sample = gen_sample(&cfg, 0);
        let small = sample.data.select_columns(&[0], &[0]);
        let bases = build_bases(&small.x, &[5], &spec).unwrap();
        let f = preliminary_fit(&small, &bases, &LossSpec::Squared, &ScaleSpec::default(), &PrelimOptions::default())
            .unwrap();
        PlamFit {
            beta: vec![1.0; 10],
            c_blocks: vec![f.c_blocks[0].clone(); 10],
            bases: vec![bases[0].clone(); 10],
            active_linear,
            active_additive,
            ..f
        }
    }

    #[test]
    fn eta_values() {
        assert_eq!(true_eta(0, 0.5), 0.0);
        assert_relative_eq!(true_eta(1, 0.5), -1.0, epsilon = 1e-15);
        assert_relative_eq!(true_eta(3, 0.5), 2.0 - 4.0 / std::f64::consts::PI, epsilon = 1e-15);
        assert_relative_eq!(true_eta(3, 0.5), 0.726760, epsilon = 1e-6);
        assert_eq!(true_eta(7, 0.3), 0.0);
    }

    #[test]
    fn true_curves_are_centered() {
        let m = 100_000;
        for j in 0..4 {
            let mean = (0..m).map(|i| true_eta(j, (i as f64 + 0.5) / m as f64)).sum::<f64>() / m as f64;
            assert!(mean.abs() < 1e-6, "component {j}");
        }
    }

    #[test]
    fn correlation_of_adjacent_covariates() {
        let cfg = SimConfig::new(100_000, Contamination::C0, 1, 11);
        let z = gen_sample(&cfg, 0).data.z;
        let (a, b) = (z.column(0), z.column(1));
        let n = a.len() as f64;
        let (ma, mb) = (a.mean(), b.mean());
        let cov = a.iter().zip(b.iter()).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let corr = cov / (a.variance().sqrt() * b.variance().sqrt());
        assert!((corr - 0.5).abs() < 0.01, "corr {corr}");
    }

    #[test]
    fn leverage_rows_are_replaced() {
        let cfg = SimConfig::new(200, Contamination::C6, 1, 3);
        let s = gen_sample(&cfg, 0);
        let full_rows = (0..200).filter(|&i| s.data.z.row(i).iter().all(|&v| v == 20.0)).count();
        assert_eq!(full_rows, 10);
        assert_eq!(s.leverage_rows.len(), 10);
        let c7 = gen_sample(&SimConfig { contamination: Contamination::C7, ..cfg.clone() }, 0);
        assert_eq!(c7.leverage_rows.len(), 20);
    }

    #[test]
    fn responses_come_from_clean_covariates() {
        let cfg = SimConfig::new(200, Contamination::C7, 1, 5);
        let clean = gen_sample(&SimConfig { contamination: Contamination::C0, ..cfg.clone() }, 0);
        let dirty = gen_sample(&cfg, 0);
        // same stream: identical draws for Z, X and u until the leverage step
        assert_eq!(clean.data.y, dirty.data.y);
        assert_eq!(clean.data.x, dirty.data.x);
    }

    #[test]
    fn shifted_mixture_mean() {
        let cfg = SimConfig::new(200_000, Contamination::C4, 1, 9);
        let u = gen_sample(&cfg, 0).errors;
        assert!((u.mean() - 0.75).abs() < 0.03, "mean {}", u.mean());
    }

    #[test]
    fn t3_errors_have_heavy_tails() {
        let cfg = SimConfig::new(100_000, Contamination::C1, 1, 9);
        let u = gen_sample(&cfg, 0).errors;
        // P(|t3| > 3.182) = 0.05
        let tail = u.iter().filter(|v| v.abs() > 3.182446).count() as f64 / u.len() as f64;
        assert!((tail - 0.05).abs() < 0.004, "tail {tail}");
    }

    #[test]
    fn replications_are_reproducible_in_isolation() {
        let cfg = SimConfig::new(50, Contamination::C2, 5, 77);
        assert_eq!(gen_sample(&cfg, 3), gen_sample(&cfg, 3));
        assert_ne!(gen_sample(&cfg, 3).data.y, gen_sample(&cfg, 4).data.y);
    }

    #[test]
    fn metrics_on_reference_supports() {
        let truth_l = SimConfig::new(10, Contamination::C0, 1, 0).truth_linear();
        let truth_a = SimConfig::new(10, Contamination::C0, 1, 0).truth_additive();
        let oracle = selection_metrics(&fit_with_support(truth_l.clone(), truth_a.clone()), &truth_l, &truth_a);
        assert_eq!((oracle.linear.c, oracle.additive.c, oracle.complete.c), (6, 6, 12));
        assert_eq!((oracle.complete.ic, oracle.complete.cf), (0, true));
        let dense = selection_metrics(&fit_with_support(vec![true; 10], vec![true; 10]), &truth_l, &truth_a);
        assert_eq!((dense.complete.c, dense.complete.ic, dense.complete.cf), (0, 0, false));
        let empty = selection_metrics(&fit_with_support(vec![false; 10], vec![false; 10]), &truth_l, &truth_a);
        assert_eq!((empty.linear.c, empty.additive.c, empty.complete.c), (6, 6, 12));
        assert_eq!((empty.linear.ic, empty.additive.ic, empty.complete.ic), (4, 4, 8));
        assert!(!empty.complete.cf);
    }

    #[test]
    fn gmse_quadratic_forms() {
        let s = ar_covariance(10, 0.5);
        let b = BETA_TRUE;
        assert_eq!(gmse(&b, &b, &s).unwrap(), 0.0);
        let mut e1 = b;
        e1[0] += 1.0;
        assert_relative_eq!(gmse(&e1, &b, &s).unwrap(), 1.0, epsilon = 1e-14);
        e1[1] += 1.0;
        assert_relative_eq!(gmse(&e1, &b, &s).unwrap(), 3.0, epsilon = 1e-14);
        assert!(gmse(&b[..3], &b, &s).is_err());
    }

    #[test]
    fn rase_of_zero_fit_is_size_of_truth() {
        let mut fit = fit_with_support(vec![false; 10], vec![false; 10]);
        fit.c_blocks.iter_mut().for_each(|c| c.iter_mut().for_each(|v| *v = 0.0));
        let m = 1000;
        let grid: Vec<f64> = (0..m).map(|k| k as f64 / 999.0).collect();
        let oracle: f64 = (0..4).map(|j| grid.iter().map(|&t| true_eta(j, t).powi(2)).sum::<f64>()).sum();
        assert_relative_eq!(rase(&fit, m), (oracle / m as f64).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn rase_matches_direct_evaluation_and_scales() {
        let fit =
            fit_with_support(vec![true; 10], vec![true, true, false, false, true, false, false, false, false, false]);
        let m = 1000;
        let grid = unit_grid(m);
        let mut total = 0.0;
        for j in 0..10 {
            for &t in &grid {
                let mut b = vec![0.0; fit.bases[j].dim()];
                fit.bases[j].eval_clamped_into(t, &mut b);
                let est: f64 =
                    if fit.active_additive[j] { b.iter().zip(&fit.c_blocks[j]).map(|(x, c)| x * c).sum() } else { 0.0 };
                total += (est - true_eta(j, t)).powi(2);
            }
        }
        assert!((rase(&fit, m) - (total / m as f64).sqrt()).abs() < 1e-12);

        // doubling the error curves quadruples rase²: build η̂ = η + 2(η̂ − η) on a coarse check
        let r1 = rase(&fit, 101);
        let g = unit_grid(101);
        let direct: f64 = (0..10)
            .map(|j| {
                let est = eval_additive(&fit, j, &g);
                est.iter().zip(&g).map(|(e, &t)| (2.0 * (e - true_eta(j, t))).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / 101.0;
        assert_relative_eq!(direct, 4.0 * r1 * r1, epsilon = 1e-10);
    }

    #[test]
    fn lambda_grids() {
        let (a, b) = study_lambda_grid(200, Method::Rob);
        assert_eq!(a, vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35]);
        assert_eq!(b, vec![0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5]);
        let (a, b) = study_lambda_grid(400, Method::Rob);
        assert_eq!((a.len(), b.len()), (5, 5));
        let (a, b) = study_lambda_grid(600, Method::Ls);
        assert_eq!((a.len(), b.len()), (7, 8));
    }

    #[test]
    fn names_parse() {
        assert_eq!("c5".parse::<Contamination>().unwrap(), Contamination::C5);
        assert!("C9".parse::<Contamination>().is_err());
        assert_eq!("ROB".parse::<Method>().unwrap(), Method::Rob);
        assert!("lad".parse::<Method>().is_err());
    }

    #[test]
    fn trimmed_mean_drops_tails() {
        let v: Vec<f64> = (1..=10).map(f64::from).chain([1000.0]).collect();
        // floor(1.1) = 1 value trimmed from each end
        assert_relative_eq!(trimmed_mean(&v, 0.1), (2..=10).map(f64::from).sum::<f64>() / 9.0);
        assert_eq!(trimmed_mean(&[4.0], 0.1), 4.0);
    }

    #[test]
    fn single_replication_study_reports_its_own_values() {
        let cfg = SimConfig::new(200, Contamination::C0, 1, 4);
        let opts = StudyOptions {
            methods: vec![Method::Ls],
            k_grid: Some(vec![4, 5]),
            lambda_grid: Some((vec![0.1, 0.2], vec![0.3])),
            rase_points: 200,
            ..Default::default()
        };
        let t = run_study(&cfg, &opts).unwrap();
        assert_eq!(t.rows.len(), 1);
        let row = &t.rows[0];
        let agg = t.aggregate_for(Method::Ls).unwrap();
        assert_eq!(agg.gmse_mean, row.gmse.unwrap());
        assert_eq!(agg.gmse_trimmed, row.gmse.unwrap());
        assert_eq!(agg.c_linear, row.c_linear.unwrap() as f64);
        assert_eq!(agg.oracle_gmse_mean, row.oracle_gmse.unwrap());
        assert_eq!(agg.failures, 0);
        assert!(row.c_linear.unwrap() <= 6);
    }

    #[test]
    fn oracle_fit_uses_truth_support() {
        let cfg = SimConfig::new(200, Contamination::C0, 1, 8);
        let sample = gen_sample(&cfg, 0);
        let opts = StudyOptions { k_grid: Some(vec![4, 5, 6]), subsamples: 50, ..Default::default() };
        for method in [Method::Ls, Method::Rob] {
            let fit = oracle_fit(&sample.data, &cfg, method, &opts, 0).unwrap();
            assert_eq!(fit.active_linear, cfg.truth_linear());
            assert_eq!(fit.active_additive, cfg.truth_additive());
            assert!(fit.beta[4..].iter().all(|&b| b == 0.0));
            let g = gmse(&fit.beta, &cfg.beta_true, &ar_covariance(10, 0.5)).unwrap();
            assert!(g < 0.2, "{method} oracle gmse {g}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gmse_matches_double_loop(d in proptest::collection::vec(-3.0f64..3.0, 10)) {
            let s = ar_covariance(10, 0.5);
            let est: Vec<f64> = BETA_TRUE.iter().zip(&d).map(|(b, x)| b + x).collect();
            let mut brute = 0.0;
            for k in 0..10 {
                for l in 0..10 {
                    brute += d[k] * 0.5f64.powi((k as i32 - l as i32).abs()) * d[l];
                }
            }
            prop_assert!((gmse(&est, &BETA_TRUE, &s).unwrap() - brute).abs() < 1e-12);
        }

        #[test]
        fn correct_plus_false_positive_is_six(mask_l in proptest::collection::vec(any::<bool>(), 10), mask_a in proptest::collection::vec(any::<bool>(), 10)) {
            let cfg = SimConfig::new(10, Contamination::C0, 1, 0);
            let (tl, ta) = (cfg.truth_linear(), cfg.truth_additive());
            let fit = PlamFit { active_linear: mask_l.clone(), active_additive: mask_a.clone(), ..fit_with_support(vec![true; 10], vec![true; 10]) };
            let m = selection_metrics(&fit, &tl, &ta);
            let fp_l = mask_l.iter().zip(&tl).filter(|(a, t)| **a && !**t).count();
            let fp_a = mask_a.iter().zip(&ta).filter(|(a, t)| **a && !**t).count();
            prop_assert_eq!(m.linear.c + fp_l, 6);
            prop_assert_eq!(m.additive.c + fp_a, 6);
        }
    }
}
