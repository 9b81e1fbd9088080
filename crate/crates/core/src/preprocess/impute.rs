//! Chained-equation imputation.
//!
//! Fitting runs the usual sweeps on the training rows: fill with column
//! means, then repeatedly regress each incomplete column on all the others
//! and overwrite its missing cells. The fitted regressions are kept so the
//! same chain can be replayed row by row on new data without refitting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cholesky_solve;
use crate::window::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputerConfig {
    /// Ridge penalty on the unit-variance predictor scale.
    pub ridge: f64,
    pub max_sweeps: usize,
    pub tolerance: f64,
}

impl Default for ImputerConfig {
    fn default() -> Self {
        ImputerConfig {
            ridge: 1e-8,
            max_sweeps: 10,
            tolerance: 1e-4,
        }
    }
}

/// Linear model predicting one column from all others (own slot is zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRegression {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl ColumnRegression {
    fn predict(&self, row: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(row)
                .map(|(c, x)| c * x)
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputerState {
    pub version: u32,
    pub columns: Vec<String>,
    pub initial_fill: Vec<f64>,
    /// Column update order: descending observed count.
    pub order: Vec<usize>,
    pub regressions: Vec<ColumnRegression>,
    /// Sweeps run at fit time; also the cap when replaying on a row.
    pub sweeps: usize,
    pub tolerance: f64,
}

pub const IMPUTER_VERSION: u32 = 1;

fn ridge_fit(x: &[f64], p: usize, target: usize, rows: &[usize], ridge: f64) -> Result<ColumnRegression> {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; p];
    for &i in rows {
        for (m, v) in mean.iter_mut().zip(&x[i * p..(i + 1) * p]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut sd = vec![0.0; p];
    for &i in rows {
        for (k, s) in sd.iter_mut().enumerate() {
            *s += (x[i * p + k] - mean[k]).powi(2);
        }
    }
    sd.iter_mut().for_each(|s| *s = (*s / n).sqrt());

    let preds: Vec<usize> = (0..p).filter(|&k| k != target).collect();
    let q = preds.len();
    let mut gram = vec![0.0; q * q];
    let mut rhs = vec![0.0; q];
    let mut z = vec![0.0; q];
    for &i in rows {
        let row = &x[i * p..(i + 1) * p];
        for (zi, &k) in z.iter_mut().zip(&preds) {
            *zi = if sd[k] > 0.0 { (row[k] - mean[k]) / sd[k] } else { 0.0 };
        }
        let y = row[target] - mean[target];
        for a in 0..q {
            rhs[a] += z[a] * y;
            for b in 0..=a {
                gram[a * q + b] += z[a] * z[b];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            gram[b * q + a] = gram[a * q + b];
        }
    }
    for v in gram.iter_mut() {
        *v /= n;
    }
    for v in rhs.iter_mut() {
        *v /= n;
    }
    for a in 0..q {
        gram[a * q + a] += ridge;
    }
    let beta = cholesky_solve(&gram, &rhs, q).ok_or_else(|| {
        Error::Numeric(format!("imputation regression for column {target} is singular"))
    })?;
    let mut coefficients = vec![0.0; p];
    let mut intercept = mean[target];
    for (b, &k) in beta.iter().zip(&preds) {
        if sd[k] > 0.0 {
            coefficients[k] = b / sd[k];
            intercept -= coefficients[k] * mean[k];
        }
    }
    if !intercept.is_finite() || coefficients.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite imputation coefficients for column {target}"
        )));
    }
    Ok(ColumnRegression {
        intercept,
        coefficients,
    })
}

/// Fits the imputer on training rows only.
pub fn fit_imputer(train: &FeatureMatrix, cfg: &ImputerConfig) -> Result<ImputerState> {
    let p = train.n_cols();
    let n = train.n_rows();
    if p < 2 {
        return Err(Error::precondition("imputation needs at least two columns"));
    }
    let mut observed = vec![Vec::new(); p];
    let mut missing = vec![Vec::new(); p];
    for i in 0..n {
        for j in 0..p {
            if train.get(i, j).is_nan() {
                missing[j].push(i);
            } else {
                observed[j].push(i);
            }
        }
    }
    for (j, obs) in observed.iter().enumerate() {
        if obs.len() < 2 {
            return Err(Error::precondition(format!(
                "column `{}` has {} observed training value(s); need at least 2",
                train.columns[j].name,
                obs.len()
            )));
        }
    }

    let initial_fill: Vec<f64> = observed
        .iter()
        .enumerate()
        .map(|(j, obs)| obs.iter().map(|&i| train.get(i, j)).sum::<f64>() / obs.len() as f64)
        .collect();
    let mut x = train.values().to_vec();
    for (j, miss) in missing.iter().enumerate() {
        for &i in miss {
            x[i * p + j] = initial_fill[j];
        }
    }

    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| observed[b].len().cmp(&observed[a].len()).then(a.cmp(&b)));

    let mut regressions: Vec<Option<ColumnRegression>> = vec![None; p];
    let incomplete: Vec<usize> = order.iter().copied().filter(|&j| !missing[j].is_empty()).collect();
    let mut sweeps = 0;
    if !incomplete.is_empty() {
        while sweeps < cfg.max_sweeps {
            sweeps += 1;
            let mut max_change: f64 = 0.0;
            for &j in &incomplete {
                let reg = ridge_fit(&x, p, j, &observed[j], cfg.ridge)?;
                for &i in &missing[j] {
                    let new = reg.predict(&x[i * p..(i + 1) * p]);
                    max_change = max_change.max((new - x[i * p + j]).abs());
                    x[i * p + j] = new;
                }
                regressions[j] = Some(reg);
            }
            if max_change < cfg.tolerance {
                break;
            }
        }
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let regressions = regressions
        .into_iter()
        .enumerate()
        .map(|(j, r)| match r {
            Some(r) => Ok(r),
            None => ridge_fit(&x, p, j, &all_rows, cfg.ridge),
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ImputerState {
        version: IMPUTER_VERSION,
        columns: train.column_names(),
        initial_fill,
        order,
        regressions,
        sweeps: sweeps.max(1),
        tolerance: cfg.tolerance,
    })
}

impl ImputerState {
    /// Fills one row in place by replaying the fitted chain.
    pub fn impute_row(&self, row: &mut [f64]) {
        let miss: Vec<usize> = self.order.iter().copied().filter(|&j| row[j].is_nan()).collect();
        if miss.is_empty() {
            return;
        }
        for &j in &miss {
            row[j] = self.initial_fill[j];
        }
        for _ in 0..self.sweeps {
            let mut max_change: f64 = 0.0;
            for &j in &miss {
                let new = self.regressions[j].predict(row);
                max_change = max_change.max((new - row[j]).abs());
                row[j] = new;
            }
            if max_change < self.tolerance {
                break;
            }
        }
    }
}

/// Imputes every missing cell; rows are processed independently.
pub fn impute(state: &ImputerState, rows: &FeatureMatrix) -> Result<FeatureMatrix> {
    if rows.column_names() != state.columns {
        return Err(Error::precondition(
            "imputer columns differ from the matrix being imputed",
        ));
    }
    let p = rows.n_cols();
    let mut values = rows.values().to_vec();
    for row in values.chunks_mut(p) {
        state.impute_row(row);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("imputation produced a non-finite value".into()));
    }
    let mut out = rows.with_values(values)?;
    for c in &mut out.columns {
        c.missing_fraction = 0.0;
    }
    Ok(out)
}
