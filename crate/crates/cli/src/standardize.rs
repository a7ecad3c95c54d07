//! Median/MAD scaling of CSV columns, with binary columns left untouched.

use crate::error::{CliError, CliResult};
use plam_core::loss::{mad, median};
use plam_core::model::Table;
use serde::Serialize;

/// How one column was transformed; `center = 0, scale = 1` for exempt columns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnScaling {
    pub column: String,
    pub center: f64,
    pub scale: f64,
    pub binary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scaling {
    pub columns: Vec<ColumnScaling>,
}

/// Exactly two distinct values.
pub fn is_binary(values: &[f64]) -> bool {
    let Some(&first) = values.first() else { return false };
    let mut other = None;
    for &v in values {
        if v == first {
            continue;
        }
        match other {
            None => other = Some(v),
            Some(o) if o == v => {}
            Some(_) => return false,
        }
    }
    other.is_some()
}

impl Scaling {
    /// Learns constants for `names` from `table`.
    pub fn fit(table: &Table, names: &[String]) -> CliResult<Scaling> {
        let mut columns = Vec::with_capacity(names.len());
        for name in names {
            let values = table.column(name)?;
            if is_binary(values) {
                columns.push(ColumnScaling { column: name.clone(), center: 0.0, scale: 1.0, binary: true });
                continue;
            }
            let scale = mad(values);
            if scale.is_nan() || scale <= 0.0 {
                return Err(CliError::Data(format!("column '{name}' has zero MAD and cannot be standardized")));
            }
            columns.push(ColumnScaling { column: name.clone(), center: median(values), scale, binary: false });
        }
        Ok(Scaling { columns })
    }

    /// Transforms the recorded columns of `table` with the stored constants.
    pub fn apply(&self, table: &Table) -> CliResult<Table> {
        let mut out = table.clone();
        for c in &self.columns {
            let idx = out.index_of(&c.column)?;
            for v in &mut out.columns[idx] {
                *v = (*v - c.center) / c.scale;
            }
        }
        Ok(out)
    }

    pub fn get(&self, column: &str) -> Option<&ColumnScaling> {
        self.columns.iter().find(|c| c.column == column)
    }
}
