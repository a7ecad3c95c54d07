//! `plam evaluate`: repeated random train/test splits scored by the median absolute
//! prediction error on the held-out rows.

use crate::config::{EvaluateConfig, LossName, PenaltyName};
use crate::error::{CliError, CliResult};
use crate::fit::create;
use crate::setup::{loss_spec, penalty_spec, table_rows, FitPlan, Roles};
use crate::standardize::Scaling;
use plam_core::loss::median;
use plam_core::model::{predict_dataset, residuals, Table};
use plam_core::spline::quantile_sorted;
use plam_core::{Dataset, PlamFit};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum EvalMethod {
    #[serde(rename = "pen-ls")]
    PenLs,
    #[serde(rename = "pen-rob")]
    PenRob,
    #[serde(rename = "ls")]
    Ls,
    #[serde(rename = "rob")]
    Rob,
    /// Penalized LS refitted after dropping training rows flagged by the robust fit.
    #[serde(rename = "pen-ls-out")]
    PenLsOut,
}

impl EvalMethod {
    fn name(self) -> &'static str {
        match self {
            EvalMethod::PenLs => "pen-ls",
            EvalMethod::PenRob => "pen-rob",
            EvalMethod::Ls => "ls",
            EvalMethod::Rob => "rob",
            EvalMethod::PenLsOut => "pen-ls-out",
        }
    }

    fn robust(self) -> bool {
        matches!(self, EvalMethod::PenRob | EvalMethod::Rob)
    }

    fn penalized(self) -> bool {
        !matches!(self, EvalMethod::Ls | EvalMethod::Rob)
    }
}

impl fmt::Display for EvalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMethod {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "pen-ls" => EvalMethod::PenLs,
            "pen-rob" => EvalMethod::PenRob,
            "ls" => EvalMethod::Ls,
            "rob" => EvalMethod::Rob,
            "pen-ls-out" => EvalMethod::PenLsOut,
            other => return Err(CliError::Usage(format!("unknown evaluation method '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitRow {
    pub split: usize,
    pub method: EvalMethod,
    pub mape: Option<f64>,
    pub size: Option<usize>,
    pub k_used: Option<usize>,
    /// Training rows dropped before the fit (only `pen-ls-out` drops any).
    pub dropped: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalAggregate {
    pub method: EvalMethod,
    pub splits: usize,
    pub failures: usize,
    pub mean_mape: f64,
    pub sd_mape: f64,
    pub mean_size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateOutputs {
    pub splits: PathBuf,
    pub aggregate: PathBuf,
    pub rows: Vec<SplitRow>,
    pub aggregates: Vec<EvalAggregate>,
}

/// Median of `|y - ŷ|`.
pub fn mape(y: &[f64], fitted: &[f64]) -> f64 {
    let abs: Vec<f64> = y.iter().zip(fitted).map(|(a, b)| (a - b).abs()).collect();
    median(&abs)
}

/// Indices inside the boxplot fences `[Q1 - 1.5 IQR, Q3 + 1.5 IQR]`.
pub fn inside_fences(r: &[f64]) -> Vec<usize> {
    let mut sorted = r.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (q1, q3) = (quantile_sorted(&sorted, 0.25), quantile_sorted(&sorted, 0.75));
    let (lo, hi) = (q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1));
    (0..r.len()).filter(|&i| r[i] >= lo && r[i] <= hi).collect()
}

/// Held-out rows of split `split`, sorted.
pub fn holdout_rows(seed: u64, split: usize, n: usize, holdout: usize) -> Vec<usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(split as u64);
    let mut rows = index::sample(&mut rng, n, holdout).into_vec();
    rows.sort_unstable();
    rows
}

struct SplitData {
    train: Dataset,
    test: Dataset,
}

fn split_data(roles: &Roles, table: &Table, test_rows: &[usize], standardize: bool) -> CliResult<SplitData> {
    let train_rows: Vec<usize> = {
        let mut held = test_rows.iter().peekable();
        (0..table.nrows())
            .filter(|i| {
                if held.peek() == Some(&i) {
                    held.next();
                    false
                } else {
                    true
                }
            })
            .collect()
    };
    let (train_t, test_t) = (table_rows(table, &train_rows), table_rows(table, test_rows));
    let (train_t, test_t) = if standardize {
        let s = Scaling::fit(&train_t, &roles.all())?;
        (s.apply(&train_t)?, s.apply(&test_t)?)
    } else {
        (train_t, test_t)
    };
    let build = |t: &Table| Dataset::from_table(t, &roles.response, &roles.linear, &roles.additive);
    Ok(SplitData { train: build(&train_t)?, test: build(&test_t)? })
}

struct Evaluator<'a> {
    cfg: &'a EvaluateConfig,
}

impl Evaluator<'_> {
    fn fit(&self, method: EvalMethod, data: &Dataset, split: usize) -> CliResult<PlamFit> {
        let m = &self.cfg.model;
        let loss_name = if method.robust() { LossName::Tukey } else { LossName::Squared };
        let penalty = if method.penalized() { m.penalty } else { PenaltyName::None };
        let mut model = m.clone();
        model.seed = m.seed.wrapping_add(split as u64);
        let plan = FitPlan::new(
            &model,
            loss_spec(loss_name, m.tukey_c)?,
            penalty_spec(penalty, m.penalty_param)?,
            data.n(),
            data.q(),
            data.p(),
        )?;
        Ok(plan.run(data)?.fit)
    }

    fn score(&self, method: EvalMethod, fit: &PlamFit, test: &Dataset) -> CliResult<(f64, usize)> {
        let fitted = predict_dataset(fit, test)?;
        let size = if method.penalized() {
            let (a, b) = fit.df();
            a + b
        } else {
            fit.q() + fit.p()
        };
        Ok((mape(test.y.as_slice(), fitted.as_slice()), size))
    }

    fn run_split(&self, roles: &Roles, table: &Table, methods: &[EvalMethod], split: usize) -> Vec<SplitRow> {
        let test_rows = holdout_rows(self.cfg.model.seed, split, table.nrows(), self.cfg.holdout);
        let data = split_data(roles, table, &test_rows, self.cfg.model.standardize);
        let mut robust_fit: Option<CliResult<PlamFit>> = None;
        methods
            .iter()
            .map(|&method| {
                let mut row = SplitRow { split, method, mape: None, size: None, k_used: None, dropped: 0, error: None };
                let result = data.as_ref().map_err(|e| CliError::Data(e.to_string())).and_then(|d| {
                    let fit = match method {
                        EvalMethod::PenLsOut => {
                            let rob = robust_fit
                                .get_or_insert_with(|| self.fit(EvalMethod::PenRob, &d.train, split))
                                .as_ref()
                                .map_err(|e| CliError::Numerical(format!("robust screening fit failed: {e}")))?;
                            let r = residuals(rob, &d.train)?;
                            let keep = inside_fences(r.as_slice());
                            row.dropped = d.train.n() - keep.len();
                            self.fit(EvalMethod::PenLs, &d.train.select_rows(&keep), split)?
                        }
                        EvalMethod::PenRob => {
                            let fit = self.fit(method, &d.train, split);
                            let out = fit.as_ref().map(Clone::clone).map_err(|e| CliError::Numerical(e.to_string()));
                            robust_fit = Some(fit);
                            out?
                        }
                        _ => self.fit(method, &d.train, split)?,
                    };
                    row.k_used = fit.k_used.first().copied();
                    self.score(method, &fit, &d.test)
                });
                match result {
                    Ok((m, s)) => {
                        row.mape = Some(m);
                        row.size = Some(s);
                    }
                    Err(e) => row.error = Some(e.to_string()),
                }
                row
            })
            .collect()
    }
}

fn aggregate(method: EvalMethod, rows: &[SplitRow]) -> EvalAggregate {
    let mine: Vec<&SplitRow> = rows.iter().filter(|r| r.method == method).collect();
    let mapes: Vec<f64> = mine.iter().filter_map(|r| r.mape).collect();
    let sizes: Vec<f64> = mine.iter().filter_map(|r| r.size.map(|s| s as f64)).collect();
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let m = mean(&mapes);
    let sd = if mapes.len() > 1 {
        (mapes.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (mapes.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    EvalAggregate {
        method,
        splits: mine.len(),
        failures: mine.len() - mapes.len(),
        mean_mape: m,
        sd_mape: sd,
        mean_size: mean(&sizes),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Runs every split for every method and writes `{prefix}.splits.csv` and `{prefix}.evaluate.csv`.
pub fn cmd_evaluate(cfg: &EvaluateConfig) -> CliResult<EvaluateOutputs> {
    let roles = Roles::from_config(&cfg.model)?;
    let methods: Vec<EvalMethod> = cfg.methods.iter().map(|s| s.parse()).collect::<CliResult<_>>()?;
    if methods.is_empty() {
        return Err(CliError::Usage("no evaluation methods given".into()));
    }
    if cfg.splits == 0 || cfg.holdout == 0 {
        return Err(CliError::Usage("--splits and --holdout must be positive".into()));
    }
    let table = roles.load()?;
    let n = table.nrows();
    if cfg.holdout >= n {
        return Err(CliError::Usage(format!("holdout of {} rows leaves nothing to train on (n = {n})", cfg.holdout)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.model.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    let ev = Evaluator { cfg };
    let per_split: Vec<Vec<SplitRow>> =
        pool.install(|| (0..cfg.splits).into_par_iter().map(|s| ev.run_split(&roles, &table, &methods, s)).collect());
    let rows: Vec<SplitRow> = per_split.into_iter().flatten().collect();
    let aggregates: Vec<EvalAggregate> = methods.iter().map(|&m| aggregate(m, &rows)).collect();
    let out = EvaluateOutputs {
        splits: format!("{}.splits.csv", cfg.model.out_prefix).into(),
        aggregate: format!("{}.evaluate.csv", cfg.model.out_prefix).into(),
        rows,
        aggregates,
    };
    write_csv(&out.splits, &out.rows)?;
    write_csv(&out.aggregate, &out.aggregates)?;
    let ok = out.rows.iter().filter(|r| r.mape.is_some()).count();
    if (ok as f64) < crate::simulate::MIN_SUCCESS_RATE * out.rows.len() as f64 {
        return Err(CliError::Numerical(format!("only {ok} of {} fits succeeded", out.rows.len())));
    }
    Ok(out)
}
