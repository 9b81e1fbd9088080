//! Learners: boosted trees, the logistic baseline, and tuning.

pub mod gbdt;
mod logistic;
mod tune;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gbdt::{
    sigmoid, train_gbdt, train_gbdt_traced, train_gbdt_with_validation, weighted_log_loss, BoostedEnsemble,
    GbdtParams, TrainTrace, Tree, TreeNode, MODEL_VERSION,
};
pub use logistic::{train_logistic, LogisticConfig, LogisticModel};
pub use tune::{grid_search, select_best, GridRow, GridSearchResult, HyperGrid, TuneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub negative: f64,
    pub positive: f64,
}

/// Inverse class weights `n / (2 n_c)`, which give both classes equal mass.
pub fn class_weights(labels: &[bool]) -> Result<ClassWeights> {
    let n = labels.len();
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 || pos == n {
        return Err(Error::precondition("class weights need both classes present"));
    }
    let n = n as f64;
    Ok(ClassWeights {
        negative: n / (2.0 * (n - pos as f64)),
        positive: n / (2.0 * pos as f64),
    })
}

pub fn sample_weights(labels: &[bool], w: &ClassWeights) -> Vec<f64> {
    labels.iter().map(|&y| if y { w.positive } else { w.negative }).collect()
}
