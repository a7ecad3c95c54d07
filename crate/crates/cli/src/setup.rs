//! Turns a resolved [`ModelConfig`] into data and selection settings.

use crate::config::{KnotsName, LossName, ModelConfig, PenaltyName};
use crate::error::{CliError, CliResult};
use crate::standardize::Scaling;
use plam_core::model::{BasisSpec, PrelimOptions, Table};
use plam_core::penalty::SCAD_A;
use plam_core::selection::{default_k_grid, select, KGrid, LambdaGrid, Selection, SelectionGrid, SelectionOptions};
use plam_core::{Dataset, KnotPlacement, LambdaVector, LossSpec, PenaltySpec};
use std::collections::HashSet;
use std::path::PathBuf;

const MCP_GAMMA: f64 = 3.0;
const LQ_Q: f64 = 0.5;

/// Column roles after validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Roles {
    pub input: PathBuf,
    pub response: String,
    pub linear: Vec<String>,
    pub additive: Vec<String>,
}

impl Roles {
    pub fn from_config(cfg: &ModelConfig) -> CliResult<Roles> {
        let input = cfg.input.clone().ok_or_else(|| CliError::Usage("--input is required".into()))?;
        let response = cfg.response.clone().ok_or_else(|| CliError::Usage("--response is required".into()))?;
        if cfg.linear.is_empty() && cfg.additive.is_empty() {
            return Err(CliError::Usage("give at least one --linear or --additive column".into()));
        }
        let mut seen = HashSet::new();
        for name in std::iter::once(&response).chain(&cfg.linear).chain(&cfg.additive) {
            if !seen.insert(name.as_str()) {
                return Err(CliError::Usage(format!("column '{name}' is given more than one role")));
            }
        }
        Ok(Roles { input, response, linear: cfg.linear.clone(), additive: cfg.additive.clone() })
    }

    pub fn all(&self) -> Vec<String> {
        std::iter::once(&self.response).chain(&self.linear).chain(&self.additive).cloned().collect()
    }

    pub fn load(&self) -> CliResult<Table> {
        let table = Table::from_path(&self.input)?;
        for name in self.all() {
            table.index_of(&name)?;
        }
        if table.nrows() == 0 {
            return Err(CliError::Data(format!("{} has no data rows", self.input.display())));
        }
        Ok(table)
    }

    /// Builds the dataset, standardizing first when `standardize` is set.
    pub fn dataset(&self, table: &Table, standardize: bool) -> CliResult<(Dataset, Option<Scaling>)> {
        let (table, scaling) = if standardize {
            let s = Scaling::fit(table, &self.all())?;
            (s.apply(table)?, Some(s))
        } else {
            (table.clone(), None)
        };
        Ok((Dataset::from_table(&table, &self.response, &self.linear, &self.additive)?, scaling))
    }
}

/// Keeps `rows` of every column.
pub fn table_rows(table: &Table, rows: &[usize]) -> Table {
    Table {
        headers: table.headers.clone(),
        columns: table.columns.iter().map(|c| rows.iter().map(|&i| c[i]).collect()).collect(),
    }
}

pub fn loss_spec(name: LossName, c: f64) -> CliResult<LossSpec> {
    match name {
        LossName::Squared => Ok(LossSpec::Squared),
        LossName::Tukey => Ok(LossSpec::tukey(c)?),
    }
}

/// `None` for the unpenalized fit.
pub fn penalty_spec(name: PenaltyName, param: Option<f64>) -> CliResult<Option<PenaltySpec>> {
    let spec = match name {
        PenaltyName::None => return Ok(None),
        PenaltyName::Scad => PenaltySpec::Scad { a: param.unwrap_or(SCAD_A) },
        PenaltyName::Mcp => PenaltySpec::Mcp { gamma: param.unwrap_or(MCP_GAMMA) },
        PenaltyName::L1 => PenaltySpec::L1,
        PenaltyName::Lq => PenaltySpec::Lq { q: param.unwrap_or(LQ_Q) },
        PenaltyName::Hard => PenaltySpec::Hard,
    };
    spec.validate()?;
    if !spec.supports_lqa() {
        return Err(CliError::Usage(format!("penalty {spec:?} cannot be fitted by local quadratic approximation")));
    }
    Ok(Some(spec))
}

/// Everything `select` needs for one dataset.
#[derive(Debug, Clone)]
pub struct FitPlan {
    pub grid: SelectionGrid,
    pub opts: SelectionOptions,
}

impl FitPlan {
    pub fn new(
        cfg: &ModelConfig,
        loss: LossSpec,
        penalty: Option<PenaltySpec>,
        n: usize,
        q: usize,
        p: usize,
    ) -> CliResult<FitPlan> {
        if cfg.order == 0 {
            return Err(CliError::Usage("--order must be at least 1".into()));
        }
        let ladder = match &cfg.k_grid {
            Some(ks) if ks.is_empty() => return Err(CliError::Usage("--k-grid is empty".into())),
            Some(ks) => ks.clone(),
            None => default_k_grid(n, cfg.order),
        };
        // without additive columns every k gives the same model
        let ladder = if p == 0 { ladder[..1].to_vec() } else { ladder };
        let lambda_grid = match penalty {
            None => LambdaGrid::General(vec![LambdaVector::zeros(q, p)]),
            Some(_) => {
                if cfg.lambda1_grid.is_empty() || cfg.lambda2_grid.is_empty() {
                    return Err(CliError::Usage("penalty grids must not be empty".into()));
                }
                if cfg.adaptive {
                    LambdaGrid::adaptive_product(&cfg.lambda1_grid, &cfg.lambda2_grid)
                } else {
                    LambdaGrid::General(
                        cfg.lambda1_grid
                            .iter()
                            .flat_map(|&a| cfg.lambda2_grid.iter().map(move |&b| LambdaVector::constant(q, p, a, b)))
                            .collect(),
                    )
                }
            }
        };
        let placement = match cfg.knots {
            KnotsName::Quantile => KnotPlacement::Quantile,
            KnotsName::Uniform => KnotPlacement::Uniform,
        };
        let opts = SelectionOptions {
            basis: BasisSpec { order: cfg.order, placement, interval: None },
            loss,
            penalty: penalty.unwrap_or_default(),
            prelim: PrelimOptions { subsamples: cfg.subsamples, seed: cfg.seed, ..Default::default() },
            ..Default::default()
        };
        let grid = SelectionGrid { k_grid: KGrid::Ladder(ladder), lambda_grid };
        grid.validate(p)?;
        Ok(FitPlan { grid, opts })
    }

    pub fn run(&self, data: &Dataset) -> CliResult<Selection> {
        Ok(select(data, &self.grid, &self.opts)?)
    }
}
