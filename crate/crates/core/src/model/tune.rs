//! Grid search over boosting hyperparameters with stratified k-fold CV.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::auroc;
use crate::model::gbdt::{train_gbdt, GbdtParams};
use crate::model::{class_weights, sample_weights};
use crate::preprocess::{fit_imputer, impute, stratified_kfold, ImputerConfig};
use crate::window::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperGrid {
    pub max_depth: Vec<usize>,
    pub rounds: Vec<usize>,
    pub eta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    pub min_child_weight: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            max_depth: vec![2, 4, 6],
            rounds: vec![100, 200],
            eta: vec![0.05, 0.1],
            lambda: vec![1.0],
            gamma: vec![0.0],
            min_child_weight: vec![1.0],
        }
    }
}

impl HyperGrid {
    pub fn single(params: &GbdtParams) -> Self {
        HyperGrid {
            max_depth: vec![params.max_depth],
            rounds: vec![params.rounds],
            eta: vec![params.eta],
            lambda: vec![params.lambda],
            gamma: vec![params.gamma],
            min_child_weight: vec![params.min_child_weight],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lists: [(&str, usize); 6] = [
            ("max_depth", self.max_depth.len()),
            ("rounds", self.rounds.len()),
            ("eta", self.eta.len()),
            ("lambda", self.lambda.len()),
            ("gamma", self.gamma.len()),
            ("min_child_weight", self.min_child_weight.len()),
        ];
        for (name, len) in lists {
            if len == 0 {
                return Err(Error::config(format!("grid.{name}"), "candidate list is empty"));
            }
        }
        for p in self.points(&GbdtParams::default()) {
            p.validate()?;
        }
        Ok(())
    }

    /// Cartesian product, each point filled into a copy of `base`.
    pub fn points(&self, base: &GbdtParams) -> Vec<GbdtParams> {
        let mut out = Vec::new();
        for &max_depth in &self.max_depth {
            for &rounds in &self.rounds {
                for &eta in &self.eta {
                    for &lambda in &self.lambda {
                        for &gamma in &self.gamma {
                            for &min_child_weight in &self.min_child_weight {
                                out.push(GbdtParams {
                                    max_depth,
                                    rounds,
                                    eta,
                                    lambda,
                                    gamma,
                                    min_child_weight,
                                    ..base.clone()
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub params: GbdtParams,
    pub fold_auroc: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: GbdtParams,
    pub best_index: usize,
    pub table: Vec<GridRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub k: usize,
    pub seed: u64,
    pub imputer: ImputerConfig,
    /// Fields not covered by the grid (subsample, seed) come from here.
    pub base: GbdtParams,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            k: 5,
            seed: 42,
            imputer: ImputerConfig::default(),
            base: GbdtParams::default(),
        }
    }
}

/// Preference order among equally scoring grid points.
fn tie_key(p: &GbdtParams) -> (usize, usize, [u64; 4]) {
    let bits = |x: f64| x.to_bits();
    (p.rounds, p.max_depth, [bits(p.eta), bits(p.lambda), bits(p.gamma), bits(p.min_child_weight)])
}

/// Index of the winning row: highest mean AUROC, ties to fewer rounds, then
/// shallower depth, then the lexicographically smaller remaining values.
pub fn select_best(table: &[GridRow]) -> usize {
    let mut best = 0;
    for (i, row) in table.iter().enumerate().skip(1) {
        let b = &table[best];
        if row.mean > b.mean || (row.mean == b.mean && tie_key(&row.params) < tie_key(&b.params)) {
            best = i;
        }
    }
    best
}

/// Cross-validated grid search. The matrix holds training rows only and may
/// contain missing cells; the imputer is refit inside every fold.
pub fn grid_search(m: &FeatureMatrix, grid: &HyperGrid, cfg: &TuneConfig) -> Result<GridSearchResult> {
    grid.validate()?;
    let labels = &m.labels;
    let folds = stratified_kfold(labels, cfg.k, cfg.seed)?;
    let prepared: Vec<(FeatureMatrix, FeatureMatrix, Vec<f64>)> = (0..cfg.k)
        .map(|f| {
            let train_idx: Vec<usize> = (0..m.n_rows()).filter(|&i| folds[i] != f).collect();
            let val_idx: Vec<usize> = (0..m.n_rows()).filter(|&i| folds[i] == f).collect();
            let train = m.subset_rows(&train_idx);
            let val = m.subset_rows(&val_idx);
            let state = fit_imputer(&train, &cfg.imputer)?;
            let train = impute(&state, &train)?;
            let val = impute(&state, &val)?;
            let w = sample_weights(&train.labels, &class_weights(&train.labels)?);
            Ok((train, val, w))
        })
        .collect::<Result<_>>()?;
    let points = grid.points(&cfg.base);
    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|g| (0..cfg.k).map(move |f| (g, f))).collect();
    let scores: Vec<f64> = jobs
        .par_iter()
        .map(|&(g, f)| {
            let (train, val, w) = &prepared[f];
            let model = train_gbdt(train, &train.labels, w, &points[g])?;
            auroc(&model.predict(val)?, &val.labels)
        })
        .collect::<Result<_>>()?;
    let table: Vec<GridRow> = points
        .into_iter()
        .enumerate()
        .map(|(g, params)| {
            let fold_auroc = scores[g * cfg.k..(g + 1) * cfg.k].to_vec();
            let k = fold_auroc.len() as f64;
            let mean = fold_auroc.iter().sum::<f64>() / k;
            let std = if fold_auroc.len() > 1 {
                (fold_auroc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                0.0
            };
            GridRow { params, fold_auroc, mean, std }
        })
        .collect();
    let best_index = select_best(&table);
    Ok(GridSearchResult {
        best: table[best_index].params.clone(),
        best_index,
        table,
    })
}
