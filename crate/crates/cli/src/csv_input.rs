//! CSV ingestion: header-based column selection, automatic detection of
//! categorical columns (any non-numeric cell) and reference-coded dummy
//! expansion. Missing cells are an error, never imputed.

use anyhow::{bail, Context, Result};
use bfi_core::glm::{expand_covariates, CovariateSpec, Dataset};
use nalgebra::{DMatrix, DVector};
use std::path::Path;

pub struct LoadedData {
    pub dataset: Dataset,
    /// Expanded model column names, in declaration order.
    pub columns: Vec<String>,
}

struct RawColumn {
    name: String,
    cells: Vec<String>,
}

fn read_columns(path: &Path, wanted: &[&str]) -> Result<Vec<RawColumn>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let mut index_of = Vec::with_capacity(wanted.len());
    for name in wanted {
        let idx = headers
            .iter()
            .position(|h| h == *name)
            .with_context(|| format!("column {name:?} not found in {}", path.display()))?;
        index_of.push(idx);
    }
    let mut columns: Vec<RawColumn> = wanted
        .iter()
        .map(|name| RawColumn {
            name: (*name).to_string(),
            cells: Vec::new(),
        })
        .collect();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        for (slot, &col_idx) in index_of.iter().enumerate() {
            let cell = record.get(col_idx).unwrap_or("");
            if cell.is_empty() {
                bail!(
                    "missing value in column {:?}, data row {}",
                    columns[slot].name,
                    row_idx + 1
                );
            }
            columns[slot].cells.push(cell.to_string());
        }
    }
    if columns.first().map_or(0, |c| c.cells.len()) == 0 {
        bail!("{} contains no data rows", path.display());
    }
    Ok(columns)
}

fn numeric(cells: &[String]) -> Option<Vec<f64>> {
    cells.iter().map(|c| c.parse::<f64>().ok()).collect()
}

/// Loads the outcome and covariates; categorical covariates (any cell that
/// does not parse as a number) become reference-coded dummy columns, first
/// observed level as the reference.
pub fn load(path: &Path, outcome: &str, covariates: &[&str], center_id: &str) -> Result<LoadedData> {
    let mut wanted = vec![outcome];
    wanted.extend_from_slice(covariates);
    let mut columns = read_columns(path, &wanted)?;
    let outcome_col = columns.remove(0);
    let y_values = numeric(&outcome_col.cells)
        .with_context(|| format!("outcome column {outcome:?} must be numeric"))?;
    let n = y_values.len();

    let mut specs = Vec::new();
    let mut expanded: Vec<Vec<f64>> = Vec::new();
    for col in &columns {
        match numeric(&col.cells) {
            Some(values) => {
                specs.push(CovariateSpec::Continuous(col.name.clone()));
                expanded.push(values);
            }
            None => {
                let mut levels: Vec<String> = Vec::new();
                for cell in &col.cells {
                    if !levels.contains(cell) {
                        levels.push(cell.clone());
                    }
                }
                if levels.len() < 2 {
                    bail!(
                        "categorical column {:?} has a single level {:?}",
                        col.name,
                        levels.first()
                    );
                }
                for level in levels.iter().skip(1) {
                    expanded.push(
                        col.cells
                            .iter()
                            .map(|c| if c == level { 1.0 } else { 0.0 })
                            .collect(),
                    );
                }
                specs.push(CovariateSpec::Categorical {
                    name: col.name.clone(),
                    levels,
                });
            }
        }
    }
    let names = expand_covariates(&specs);
    let x = DMatrix::from_fn(n, names.len(), |i, j| expanded[j][i]);
    let dataset = Dataset::new(center_id, DVector::from_vec(y_values), x)?;
    Ok(LoadedData {
        dataset,
        columns: names,
    })
}
