//! Weighted logistic regression fitted by damped Newton iterations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cholesky_solve;
use crate::model::gbdt::sigmoid;
use crate::window::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticConfig {
    /// Penalty on the slopes only. Small enough to leave well-posed fits
    /// unchanged while splitting weight evenly across duplicated columns.
    pub ridge: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            ridge: 1e-8,
            max_iterations: 100,
            gradient_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub columns: Vec<String>,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the iteration cap was hit or the fitted margins split the
    /// classes perfectly.
    pub separation_warning: bool,
}

impl LogisticModel {
    pub fn margin_row(&self, row: &[f64]) -> f64 {
        self.intercept + row.iter().zip(&self.coefficients).map(|(x, b)| x * b).sum::<f64>()
    }

    pub fn predict(&self, m: &FeatureMatrix) -> Result<Vec<f64>> {
        if m.n_cols() != self.coefficients.len() {
            return Err(Error::precondition(format!(
                "logistic model expects {} features, matrix has {}",
                self.coefficients.len(),
                m.n_cols()
            )));
        }
        Ok(m.rows().map(|r| sigmoid(self.margin_row(r))).collect())
    }
}

fn objective(x: &[f64], p: usize, y: &[f64], w: &[f64], wsum: f64, theta: &[f64], ridge: f64) -> f64 {
    let mut loss = 0.0;
    for (i, row) in x.chunks(p).enumerate() {
        let m = theta[0] + row.iter().zip(&theta[1..]).map(|(a, b)| a * b).sum::<f64>();
        let sp = if m > 0.0 { m + (-m).exp().ln_1p() } else { m.exp().ln_1p() };
        loss += w[i] * (sp - y[i] * m);
    }
    loss / wsum + 0.5 * ridge * theta[1..].iter().map(|b| b * b).sum::<f64>()
}

pub fn train_logistic(m: &FeatureMatrix, labels: &[bool], weights: &[f64], cfg: &LogisticConfig) -> Result<LogisticModel> {
    let n = m.n_rows();
    let p = m.n_cols();
    if labels.len() != n || weights.len() != n {
        return Err(Error::precondition("labels/weights length differs from row count"));
    }
    if m.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::precondition("logistic regression needs complete, finite inputs"));
    }
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::precondition("sample weights sum to zero"));
    }
    let x = m.values();
    let y: Vec<f64> = labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let d = p + 1;
    let mut theta = vec![0.0; d];
    let mut current = objective(x, p, &y, weights, wsum, &theta, cfg.ridge);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        for (i, row) in x.chunks(p).enumerate() {
            let mu = sigmoid(theta[0] + row.iter().zip(&theta[1..]).map(|(a, b)| a * b).sum::<f64>());
            let r = weights[i] * (mu - y[i]) / wsum;
            let s = weights[i] * mu * (1.0 - mu) / wsum;
            let xi = |k: usize| if k == 0 { 1.0 } else { row[k - 1] };
            for a in 0..d {
                grad[a] += r * xi(a);
                for b in 0..=a {
                    hess[a * d + b] += s * xi(a) * xi(b);
                }
            }
        }
        for a in 1..d {
            grad[a] += cfg.ridge * theta[a];
            hess[a * d + a] += cfg.ridge;
        }
        for a in 0..d {
            for b in a + 1..d {
                hess[a * d + b] = hess[b * d + a];
            }
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < cfg.gradient_tolerance {
            converged = true;
            break;
        }
        // Saturated hessians (separable data) get a small diagonal boost.
        let step = cholesky_solve(&hess, &grad, d).or_else(|| {
            let mut h = hess.clone();
            for a in 0..d {
                h[a * d + a] += 1e-10;
            }
            cholesky_solve(&h, &grad, d)
        });
        let Some(step) = step else { break };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            let value = objective(x, p, &y, weights, wsum, &cand, cfg.ridge);
            if value <= current {
                theta = cand;
                current = value;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            // No decrease is attainable in floating point: we are at the optimum.
            converged = norm < cfg.gradient_tolerance.sqrt();
            break;
        }
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numeric("logistic coefficients diverged".into()));
    }
    let model = LogisticModel {
        columns: m.column_names(),
        intercept: theta[0],
        coefficients: theta[1..].to_vec(),
        iterations,
        converged,
        separation_warning: false,
    };
    // With separated classes the gradient vanishes only as the slopes run
    // off, so a small gradient alone does not mean a finite optimum.
    let mut lowest_pos = f64::INFINITY;
    let mut highest_neg = f64::NEG_INFINITY;
    for (i, row) in x.chunks(p).enumerate() {
        if weights[i] == 0.0 {
            continue;
        }
        let mg = model.margin_row(row);
        if labels[i] {
            lowest_pos = lowest_pos.min(mg);
        } else {
            highest_neg = highest_neg.max(mg);
        }
    }
    let separated = lowest_pos > highest_neg;
    Ok(LogisticModel {
        separation_warning: !converged || separated,
        ..model
    })
}
