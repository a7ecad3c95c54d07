//! `plam simulate`: the Monte Carlo study, one scheme after another.

use crate::config::SimulateConfig;
use crate::error::{CliError, CliResult};
use crate::fit::create;
use plam_core::simulation::{
    run_study, write_aggregates, write_replications, Contamination, Method, SimConfig, StudyOptions,
};
use std::path::PathBuf;

/// Replications that must succeed for a zero exit status.
pub const MIN_SUCCESS_RATE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateOutputs {
    pub replications: PathBuf,
    pub aggregate: PathBuf,
    pub success_rate: f64,
}

fn parse_all<T: std::str::FromStr>(names: &[String], what: &str) -> CliResult<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if names.is_empty() {
        return Err(CliError::Usage(format!("no {what} given")));
    }
    names.iter().map(|s| s.parse::<T>().map_err(|e| CliError::Usage(format!("{what}: {e}")))).collect()
}

pub fn study_options(cfg: &SimulateConfig) -> CliResult<StudyOptions> {
    let lambda_grid = match (&cfg.lambda1_grid, &cfg.lambda2_grid) {
        (Some(a), Some(b)) => Some((a.clone(), b.clone())),
        (None, None) => None,
        _ => return Err(CliError::Usage("give both --lambda1-grid and --lambda2-grid or neither".into())),
    };
    Ok(StudyOptions {
        methods: parse_all::<Method>(&cfg.methods, "methods")?,
        threads: cfg.threads,
        k_grid: cfg.k_grid.clone(),
        lambda_grid,
        subsamples: cfg.subsamples,
        rase_points: cfg.rase_points,
        oracle: cfg.oracle,
        ..Default::default()
    })
}

/// Runs every requested scheme and writes `{prefix}.replications.csv` and `{prefix}.aggregate.csv`.
/// Fails with a numerical error when fewer than 90% of the penalized fits succeeded.
pub fn cmd_simulate(cfg: &SimulateConfig) -> CliResult<SimulateOutputs> {
    let schemes = parse_all::<Contamination>(&cfg.contamination, "contamination")?;
    let opts = study_options(cfg)?;
    let mut rows = Vec::new();
    let mut aggregates = Vec::new();
    for scheme in schemes {
        let sim = SimConfig::new(cfg.n, scheme, cfg.reps, cfg.seed);
        log::info!("scheme {scheme}: {} replications at n = {}", cfg.reps, cfg.n);
        let table = run_study(&sim, &opts)?;
        rows.extend(table.rows);
        aggregates.extend(table.aggregates);
    }
    let out = SimulateOutputs {
        replications: format!("{}.replications.csv", cfg.out_prefix).into(),
        aggregate: format!("{}.aggregate.csv", cfg.out_prefix).into(),
        success_rate: if rows.is_empty() {
            1.0
        } else {
            rows.iter().filter(|r| r.gmse.is_some()).count() as f64 / rows.len() as f64
        },
    };
    write_replications(create(&out.replications)?, &rows)?;
    write_aggregates(create(&out.aggregate)?, &aggregates)?;
    for r in rows.iter().filter(|r| r.error.is_some()) {
        log::warn!("replication {} ({}, {}): {}", r.rep, r.contamination, r.method, r.error.as_deref().unwrap_or(""));
    }
    if out.success_rate < MIN_SUCCESS_RATE {
        return Err(CliError::Numerical(format!(
            "only {:.1}% of replications succeeded; results are in {}",
            100.0 * out.success_rate,
            out.replications.display()
        )));
    }
    Ok(out)
}
