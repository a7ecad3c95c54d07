//! Command-line flags and their JSON-config counterparts.
//!
//! Every flag `--some-name` matches the config key `"some-name"`. A config file is read
//! first and flags given on the command line replace its values.

use crate::error::{CliError, CliResult};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "plam", version, about = "Robust penalized partially linear additive models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select and fit a model on a CSV file.
    Fit(FitArgs),
    /// Run the Monte Carlo study.
    Simulate(SimulateArgs),
    /// Repeated train/test evaluation of several estimators.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ModelFlags {
    /// Input CSV with a header row.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    /// Columns entering linearly (comma separated).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linear: Option<Vec<String>>,
    /// Columns entering through spline components (comma separated).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub additive: Option<Vec<String>>,
    /// `tukey` or `squared`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tukey_c: Option<f64>,
    /// `scad`, `mcp`, `l1`, `lq`, `hard` or `none`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penalty: Option<String>,
    /// SCAD `a`, MCP `gamma` or the `q` of `lq`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penalty_param: Option<f64>,
    /// Divide the penalty levels by preliminary estimates.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adaptive: Option<bool>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda1_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda2_grid: Option<Vec<f64>>,
    /// Spline dimensions to try in order; omitted means a ladder derived from n.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_grid: Option<Vec<usize>>,
    /// `quantile` or `uniform` interior knots.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knots: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    /// Median/MAD scaling of every non-binary column.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub standardize: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subsamples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_prefix: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct FitArgs {
    /// Flat JSON object with default values for any flag.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Clone, Default, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvaluateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelFlags,
    /// Rows held out per split.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub splits: Option<usize>,
    /// Any of pen-ls, pen-rob, ls, rob, pen-ls-out.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SimulateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Schemes C0..C7 (comma separated).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contamination: Option<Vec<String>>,
    /// `ls`, `rob` or both.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda1_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda2_grid: Option<Vec<f64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subsamples: Option<usize>,
    /// Also fit the estimator restricted to the true support.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rase_points: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_prefix: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossName {
    Tukey,
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyName {
    Scad,
    Mcp,
    L1,
    Lq,
    Hard,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnotsName {
    Quantile,
    Uniform,
}

/// Resolved model settings shared by `fit` and `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct ModelConfig {
    pub input: Option<PathBuf>,
    pub response: Option<String>,
    pub linear: Vec<String>,
    pub additive: Vec<String>,
    pub loss: LossName,
    pub tukey_c: f64,
    pub penalty: PenaltyName,
    pub penalty_param: Option<f64>,
    pub adaptive: bool,
    pub lambda1_grid: Vec<f64>,
    pub lambda2_grid: Vec<f64>,
    pub k_grid: Option<Vec<usize>>,
    pub knots: KnotsName,
    pub order: usize,
    pub standardize: bool,
    pub subsamples: usize,
    pub seed: u64,
    pub threads: usize,
    pub out_prefix: String,
}

fn steps(lo: f64, step: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| ((lo + step * i as f64) * 1e6).round() / 1e6).collect()
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input: None,
            response: None,
            linear: Vec::new(),
            additive: Vec::new(),
            loss: LossName::Tukey,
            tukey_c: plam_core::loss::TUKEY_EFFICIENT_C,
            penalty: PenaltyName::Scad,
            penalty_param: None,
            adaptive: true,
            lambda1_grid: steps(0.0, 0.01, 11),
            lambda2_grid: steps(0.0, 0.1, 21),
            k_grid: None,
            knots: KnotsName::Quantile,
            order: 4,
            standardize: false,
            subsamples: 500,
            seed: 0,
            threads: 0,
            out_prefix: "plam".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct EvaluateConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub holdout: usize,
    pub splits: usize,
    pub methods: Vec<String>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            model: ModelConfig::default(),
            holdout: 100,
            splits: 50,
            methods: ["pen-ls", "pen-rob", "ls", "rob", "pen-ls-out"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct SimulateConfig {
    pub n: usize,
    pub contamination: Vec<String>,
    pub methods: Vec<String>,
    pub reps: usize,
    pub seed: u64,
    pub threads: usize,
    pub k_grid: Option<Vec<usize>>,
    pub lambda1_grid: Option<Vec<f64>>,
    pub lambda2_grid: Option<Vec<f64>>,
    pub subsamples: usize,
    pub oracle: bool,
    pub rase_points: usize,
    pub out_prefix: String,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            n: 200,
            contamination: vec!["C0".into()],
            methods: vec!["ls".into(), "rob".into()],
            reps: 100,
            seed: 0,
            threads: 0,
            k_grid: None,
            lambda1_grid: None,
            lambda2_grid: None,
            subsamples: 500,
            oracle: true,
            rase_points: 1000,
            out_prefix: "plam".into(),
        }
    }
}

fn object(v: Value, what: &str) -> CliResult<Map<String, Value>> {
    match v {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::Usage(format!("{what} must be a JSON object"))),
    }
}

fn read_config_file(path: &Path) -> CliResult<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    object(v, "config file")
}

/// Overlays `flags` on the optional config file and parses the result, rejecting unknown keys.
pub fn resolve<C>(config: Option<&Path>, flags: &impl Serialize) -> CliResult<C>
where
    C: DeserializeOwned + Serialize + Default,
{
    let known = object(serde_json::to_value(C::default()).expect("defaults serialize"), "defaults")?;
    let mut merged = match config {
        Some(p) => read_config_file(p)?,
        None => Map::new(),
    };
    if let Some(key) = merged.keys().find(|k| !known.contains_key(*k)) {
        return Err(CliError::Usage(format!("unknown config key '{key}'")));
    }
    let given = object(serde_json::to_value(flags).expect("flags serialize"), "flags")?;
    merged.extend(given);
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("bad configuration: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"tukey-c": 3.0, "seed": 9, "linear": ["a", "b"]}"#).unwrap();
        let flags = ModelFlags { seed: Some(4), ..Default::default() };
        let cfg: ModelConfig = resolve(Some(&path), &flags).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.tukey_c, 3.0);
        assert_eq!(cfg.linear, vec!["a", "b"]);
        assert_eq!(cfg.order, 4);
    }

    #[test]
    fn unknown_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"sede": 1}"#).unwrap();
        let err = resolve::<ModelConfig>(Some(&path), &ModelFlags::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn evaluate_keys_are_flat() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"holdout": 30, "loss": "squared"}"#).unwrap();
        let flags = EvaluateArgs { splits: Some(3), ..Default::default() };
        let cfg: EvaluateConfig = resolve(Some(&path), &flags).unwrap();
        assert_eq!((cfg.holdout, cfg.splits), (30, 3));
        assert_eq!(cfg.model.loss, LossName::Squared);
    }

    #[test]
    fn bad_enum_value_is_usage_error() {
        let flags = ModelFlags { penalty: Some("lasso2".into()), ..Default::default() };
        assert_eq!(resolve::<ModelConfig>(None, &flags).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn default_penalty_grid() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.lambda1_grid.len(), 11);
        assert_eq!(cfg.lambda2_grid.last(), Some(&2.0));
    }

    #[test]
    fn command_line_parses_lists() {
        let cli = Cli::try_parse_from(["plam", "fit", "--linear", "a,b", "--standardize", "--k-grid", "4,5"]).unwrap();
        let Command::Fit(args) = cli.command else { panic!("expected fit") };
        assert_eq!(args.model.linear.as_deref(), Some(&["a".to_string(), "b".to_string()][..]));
        assert_eq!(args.model.standardize, Some(true));
        assert_eq!(args.model.k_grid, Some(vec![4, 5]));
    }
}
