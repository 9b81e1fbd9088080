use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::window::FeatureMatrix;

pub const STANDARDIZER_VERSION: u32 = 1;
const SD_FLOOR: f64 = 1e-12;

/// Per-column training mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizerState {
    pub version: u32,
    pub columns: Vec<String>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

/// Fits on training rows; missing cells are ignored.
pub fn fit_standardizer(train: &FeatureMatrix) -> Result<StandardizerState> {
    let p = train.n_cols();
    let mut means = vec![0.0; p];
    let mut sds = vec![0.0; p];
    for j in 0..p {
        let col: Vec<f64> = train.column(j).into_iter().filter(|x| !x.is_nan()).collect();
        if col.is_empty() {
            return Err(Error::precondition(format!(
                "column `{}` has no observed training values",
                train.columns[j].name
            )));
        }
        let n = col.len() as f64;
        let m = col.iter().sum::<f64>() / n;
        let ss: f64 = col.iter().map(|x| (x - m).powi(2)).sum();
        means[j] = m;
        sds[j] = if col.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 }.max(SD_FLOOR);
    }
    Ok(StandardizerState {
        version: STANDARDIZER_VERSION,
        columns: train.column_names(),
        means,
        sds,
    })
}

pub fn standardize(state: &StandardizerState, rows: &FeatureMatrix) -> Result<FeatureMatrix> {
    if rows.column_names() != state.columns {
        return Err(Error::precondition(
            "standardizer columns differ from the matrix being transformed",
        ));
    }
    let p = rows.n_cols();
    let mut values = rows.values().to_vec();
    for row in values.chunks_mut(p) {
        for (j, x) in row.iter_mut().enumerate() {
            *x = (*x - state.means[j]) / state.sds[j];
        }
    }
    rows.with_values(values)
}
