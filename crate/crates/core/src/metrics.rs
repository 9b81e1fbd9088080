//! Discrimination metrics, bootstrap bands, permutation tests and
//! subgroup tables.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_pairing(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::precondition(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::precondition("scores must be finite"));
    }
    Ok(())
}

/// Pair counts behind the Mann-Whitney statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairCounts {
    pub n_pos: u64,
    pub n_neg: u64,
    pub concordant: u64,
    pub tied: u64,
}

impl PairCounts {
    pub fn auroc(&self) -> f64 {
        (2 * self.concordant + self.tied) as f64 / (2 * self.n_pos * self.n_neg) as f64
    }
}

/// Indices sorted by ascending score, split into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

fn count_pairs(groups: &[Vec<usize>], labels: &[bool]) -> PairCounts {
    let mut c = PairCounts { n_pos: 0, n_neg: 0, concordant: 0, tied: 0 };
    for g in groups {
        let pos = g.iter().filter(|&&i| labels[i]).count() as u64;
        let neg = g.len() as u64 - pos;
        c.concordant += pos * c.n_neg;
        c.tied += pos * neg;
        c.n_pos += pos;
        c.n_neg += neg;
    }
    c
}

pub fn pair_counts(scores: &[f64], labels: &[bool]) -> Result<PairCounts> {
    check_pairing(scores, labels)?;
    Ok(count_pairs(&tie_groups(scores), labels))
}

/// Area under the ROC curve, with half credit for tied pairs.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let c = pair_counts(scores, labels)?;
    if c.n_pos == 0 || c.n_neg == 0 {
        return Err(Error::precondition("AUROC is undefined with a single class"));
    }
    Ok(c.auroc())
}

/// Step-wise average precision. Rows with equal scores keep their input
/// order, so an earlier row is ranked ahead of a later one.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_pairing(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 {
        return Err(Error::precondition("average precision needs at least one positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub n_pos: usize,
    pub threshold: f64,
    /// `None` where the metric is undefined for this set of labels.
    pub auroc: Option<f64>,
    pub average_precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub balanced_accuracy: Option<f64>,
}

/// Full report with rows called positive when `score >= threshold`.
pub fn thresholded_report(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricReport> {
    check_pairing(scores, labels)?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::precondition(format!("threshold {threshold} outside [0, 1]")));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let n_pos = tp + fn_;
    let n_neg = tn + fp;
    let sensitivity = (n_pos > 0).then(|| tp as f64 / n_pos as f64);
    let specificity = (n_neg > 0).then(|| tn as f64 / n_neg as f64);
    Ok(MetricReport {
        n: scores.len(),
        n_pos,
        threshold,
        auroc: auroc(scores, labels).ok(),
        average_precision: average_precision(scores, labels).ok(),
        sensitivity,
        specificity,
        balanced_accuracy: sensitivity.zip(specificity).map(|(a, b)| (a + b) / 2.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub iterations: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            iterations: 50,
            level: 0.90,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBand {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Resamples on which the metric was undefined and that were redrawn.
    pub redraws: usize,
}

/// Linear-interpolation quantile of sorted values.
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile interval from bootstrap values, widened if needed so that
/// it brackets the point estimate.
pub(crate) fn percentile_band(point: f64, mut values: Vec<f64>, level: f64) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let lower = quantile(&values, (1.0 - level) / 2.0);
    let upper = quantile(&values, (1.0 + level) / 2.0);
    (lower.min(point), upper.max(point))
}

const MAX_DRAWS_PER_ITERATION: usize = 20;

/// Indices of a resample with replacement.
pub(crate) fn resample(n: usize, r: &mut rng::Rng) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..n)).collect()
}

/// Percentile bootstrap of `metric` over rows resampled with replacement.
/// Each iteration draws from its own seeded stream, so the result does not
/// depend on thread count.
pub fn bootstrap_ci<F>(metric: F, scores: &[f64], labels: &[bool], cfg: &BootstrapConfig) -> Result<UncertaintyBand>
where
    F: Fn(&[f64], &[bool]) -> Result<f64> + Sync,
{
    check_pairing(scores, labels)?;
    if cfg.iterations < 2 {
        return Err(Error::precondition("bootstrap needs at least two iterations"));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::precondition("confidence level must lie in (0, 1)"));
    }
    let point = metric(scores, labels)?;
    let n = scores.len();
    let draws: Vec<(Option<f64>, usize)> = (0..cfg.iterations)
        .into_par_iter()
        .map(|it| {
            let mut r = rng::stream(cfg.seed, "bootstrap", it as u64);
            let mut failed = 0;
            while failed < MAX_DRAWS_PER_ITERATION {
                let idx = resample(n, &mut r);
                let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
                match metric(&s, &y) {
                    Ok(v) => return (Some(v), failed),
                    Err(_) => failed += 1,
                }
            }
            (None, failed)
        })
        .collect();
    let redraws: usize = draws.iter().map(|d| d.1).sum();
    let values: Vec<f64> = draws.iter().filter_map(|d| d.0).collect();
    if redraws * 2 > redraws + cfg.iterations || values.len() < cfg.iterations {
        return Err(Error::precondition(format!(
            "metric undefined on {redraws} of {} bootstrap resamples",
            redraws + values.len()
        )));
    }
    let (lower, upper) = percentile_band(point, values, cfg.level);
    Ok(UncertaintyBand {
        point,
        lower,
        upper,
        level: cfg.level,
        iterations: cfg.iterations,
        seed: cfg.seed,
        redraws,
    })
}

/// Label-permutation p-value for the observed AUROC, using the add-one
/// estimator `(1 + #{permuted >= observed}) / (n + 1)`.
pub fn permutation_significance(scores: &[f64], labels: &[bool], n: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::precondition("permutation test needs at least one permutation"));
    }
    check_pairing(scores, labels)?;
    let groups = tie_groups(scores);
    let observed = count_pairs(&groups, labels);
    if observed.n_pos == 0 || observed.n_neg == 0 {
        return Err(Error::precondition("permutation test needs both classes"));
    }
    // Exact integer comparison: 2·concordant + tied decides AUROC order.
    let key = |c: &PairCounts| 2 * c.concordant + c.tied;
    let target = key(&observed);
    let hits: usize = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, "permutation", i as u64);
            let mut perm = labels.to_vec();
            perm.shuffle(&mut r);
            usize::from(key(&count_pairs(&groups, &perm)) >= target)
        })
        .sum();
    Ok((1 + hits) as f64 / (n + 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    /// Fewer rows than the configured minimum group size.
    pub small: bool,
    /// False when the group holds a single class.
    pub defined: bool,
    pub report: MetricReport,
}

pub const OVERALL_GROUP: &str = "overall";
pub const DEFAULT_MIN_GROUP_SIZE: usize = 30;

/// Per-group reports, preceded by an overall row. A row may belong to any
/// number of groups; groups are listed in sorted order.
pub fn subpopulation_report(
    scores: &[f64],
    labels: &[bool],
    tags: &[Vec<String>],
    threshold: f64,
    min_size: usize,
) -> Result<Vec<GroupReport>> {
    check_pairing(scores, labels)?;
    if tags.len() != scores.len() {
        return Err(Error::precondition("one tag list per row is required"));
    }
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, row) in tags.iter().enumerate() {
        for t in row {
            members.entry(t.as_str()).or_default().push(i);
        }
    }
    let all: Vec<usize> = (0..scores.len()).collect();
    std::iter::once((OVERALL_GROUP, &all))
        .chain(members.iter().map(|(k, v)| (*k, v)))
        .map(|(name, idx)| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            let report = thresholded_report(&s, &y, threshold)?;
            Ok(GroupReport {
                group: name.to_string(),
                small: idx.len() < min_size,
                defined: report.auroc.is_some(),
                report,
            })
        })
        .collect()
}
