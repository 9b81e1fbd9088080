use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitPlan {
    pub test_fraction: f64,
    pub k: usize,
    pub rng_seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            test_fraction: 0.20,
            k: 5,
            rng_seed: 42,
        }
    }
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config(
                "split.test_fraction",
                format!("{} outside (0, 1)", self.test_fraction),
            ));
        }
        if self.k < 2 {
            return Err(Error::config("split.k", "need at least 2 folds"));
        }
        Ok(())
    }
}

fn class_indices(labels: &[bool]) -> [Vec<usize>; 2] {
    let mut neg = Vec::new();
    let mut pos = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        if y {
            pos.push(i)
        } else {
            neg.push(i)
        }
    }
    [neg, pos]
}

/// Stratified hold-out split; returns sorted `(train, test)` row indices.
///
/// Each class contributes `round(test_fraction · n_class)` rows to the test
/// part, so the test size is within one row of `round(test_fraction · n)`.
pub fn stratified_split(labels: &[bool], plan: &SplitPlan) -> Result<(Vec<usize>, Vec<usize>)> {
    plan.validate()?;
    let classes = class_indices(labels);
    if classes.iter().any(Vec::is_empty) {
        return Err(Error::precondition("stratified split needs both classes"));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, mut idx) in classes.into_iter().enumerate() {
        let mut rng = rng::stream(plan.rng_seed, "split", c as u64);
        idx.shuffle(&mut rng);
        let n_test = (plan.test_fraction * idx.len() as f64).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Assigns each row a fold in `0..k`.
///
/// Positives are dealt round-robin first and negatives continue the same
/// rotation, so both fold sizes and per-fold positive counts differ by at
/// most one.
pub fn stratified_kfold(labels: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::precondition("k-fold needs k >= 2"));
    }
    let [mut neg, mut pos] = class_indices(labels);
    let minority = neg.len().min(pos.len());
    if k > minority {
        return Err(Error::precondition(format!(
            "k = {k} exceeds the minority class count {minority}"
        )));
    }
    pos.shuffle(&mut rng::stream(seed, "kfold", 1));
    neg.shuffle(&mut rng::stream(seed, "kfold", 0));
    let mut folds = vec![0; labels.len()];
    for (slot, &i) in pos.iter().chain(neg.iter()).enumerate() {
        folds[i] = slot % k;
    }
    Ok(folds)
}
