//! `plam fit`: select and fit one model, then write a JSON report and CSV side files.

use crate::config::ModelConfig;
use crate::error::{CliError, CliResult};
use crate::setup::{loss_spec, penalty_spec, FitPlan, Roles};
use crate::standardize::Scaling;
use plam_core::model::{eval_additive, predict_dataset};
use plam_core::selection::{write_diagnostics, KRecord};
use plam_core::{LambdaVector, LossSpec, PenaltySpec, PlamFit};
use serde::Serialize;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

/// Points per sampled additive curve.
pub const CURVE_POINTS: usize = 200;

#[derive(Debug, Clone, Serialize)]
pub struct LinearTerm {
    pub name: String,
    pub beta: f64,
    pub active: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdditiveTerm {
    pub name: String,
    pub k: usize,
    pub active: bool,
    pub interval: (f64, f64),
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub n: usize,
    pub response: String,
    pub mu: f64,
    pub sigma: f64,
    pub loss: LossSpec,
    pub penalty: Option<PenaltySpec>,
    pub adaptive: bool,
    pub k_used: Vec<usize>,
    pub lambda_tilde: Option<(f64, f64)>,
    pub lambdas: Option<LambdaVector>,
    pub linear: Vec<LinearTerm>,
    pub additive: Vec<AdditiveTerm>,
    pub converged: bool,
    pub iterations: usize,
    pub objective: Option<f64>,
    pub standardization: Option<Scaling>,
    pub k_scores: Vec<KRecord>,
}

/// Files written by [`cmd_fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutputs {
    pub report: PathBuf,
    pub residuals: PathBuf,
    pub cells: PathBuf,
}

impl FitOutputs {
    pub fn for_prefix(prefix: &str) -> FitOutputs {
        FitOutputs {
            report: format!("{prefix}.fit.json").into(),
            residuals: format!("{prefix}.residuals.csv").into(),
            cells: format!("{prefix}.cells.csv").into(),
        }
    }
}

pub fn linspace(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    match m {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect(),
    }
}

fn additive_terms(fit: &PlamFit, names: &[String]) -> Vec<AdditiveTerm> {
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let knots = fit.bases[j].knots();
            let grid = linspace(knots.lo(), knots.hi(), CURVE_POINTS);
            let values = eval_additive(fit, j, &grid);
            AdditiveTerm {
                name: name.clone(),
                k: fit.bases[j].k(),
                active: fit.active_additive[j],
                interval: (knots.lo(), knots.hi()),
                grid,
                values,
            }
        })
        .collect()
}

pub(crate) fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

/// Fits the configured model and returns the report alongside the fitted values.
pub fn fit_report(cfg: &ModelConfig) -> CliResult<(FitReport, Vec<[f64; 3]>, Vec<plam_core::selection::CellRecord>)> {
    let roles = Roles::from_config(cfg)?;
    let table = roles.load()?;
    let (data, scaling) = roles.dataset(&table, cfg.standardize)?;
    let loss = loss_spec(cfg.loss, cfg.tukey_c)?;
    let penalty = penalty_spec(cfg.penalty, cfg.penalty_param)?;
    let plan = FitPlan::new(cfg, loss, penalty, data.n(), data.q(), data.p())?;
    let sel = plan.run(&data)?;
    let fit = &sel.fit;
    let fitted = predict_dataset(fit, &data)?;
    let rows = data.y.iter().zip(fitted.iter()).map(|(&y, &f)| [y, f, y - f]).collect();
    let report = FitReport {
        n: data.n(),
        response: roles.response.clone(),
        mu: fit.mu,
        sigma: fit.sigma,
        loss,
        penalty,
        adaptive: penalty.is_some() && cfg.adaptive,
        k_used: fit.k_used.clone(),
        lambda_tilde: fit.tilde_used,
        lambdas: fit.lambdas_used.clone(),
        linear: roles
            .linear
            .iter()
            .enumerate()
            .map(|(s, name)| LinearTerm { name: name.clone(), beta: fit.beta[s], active: fit.active_linear[s] })
            .collect(),
        additive: additive_terms(fit, &roles.additive),
        converged: fit.converged,
        iterations: fit.iterations,
        objective: fit.objective,
        standardization: scaling,
        k_scores: sel.k_scores.clone(),
    };
    Ok((report, rows, sel.cells))
}

/// Runs `fit` and writes `{prefix}.fit.json`, `{prefix}.residuals.csv` and `{prefix}.cells.csv`.
pub fn cmd_fit(cfg: &ModelConfig) -> CliResult<FitOutputs> {
    let (report, rows, cells) = fit_report(cfg)?;
    let out = FitOutputs::for_prefix(&cfg.out_prefix);

    let mut w = create(&out.report)?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(|e| CliError::Data(format!("cannot write report: {e}")))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::io(&out.report, e))?;

    let mut w = csv::Writer::from_writer(create(&out.residuals)?);
    let csv_err = |e: csv::Error| CliError::Data(format!("cannot write residuals: {e}"));
    w.write_record(["row", "observed", "fitted", "residual"]).map_err(csv_err)?;
    for (i, r) in rows.iter().enumerate() {
        w.write_record([i.to_string(), r[0].to_string(), r[1].to_string(), r[2].to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(&out.residuals, e))?;

    write_diagnostics(create(&out.cells)?, &cells)?;
    log::info!("wrote {}", out.report.display());
    Ok(out)
}
