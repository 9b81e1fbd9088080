use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cohort::Minutes;
use crate::error::{Error, Result};
use crate::explain::shap::explain_rows;
use crate::model::{class_weights, sample_weights, train_gbdt, BoostedEnsemble, GbdtParams};
use crate::rng;
use crate::window::{ColumnDescriptor, FeatureMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub column: String,
    pub mean_abs_phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRanking {
    pub horizon: Minutes,
    /// Descending mean |phi|; equal values are ordered by column name.
    pub features: Vec<RankedFeature>,
}

impl HorizonRanking {
    pub fn top(&self, k: usize) -> Vec<&str> {
        self.features.iter().take(k).map(|f| f.column.as_str()).collect()
    }

    /// 1-based position of a column.
    pub fn rank_of(&self, column: &str) -> Option<usize> {
        self.features.iter().position(|f| f.column == column).map(|i| i + 1)
    }
}

pub fn rank_from_attributions(columns: &[String], phis: &[Vec<f64>], horizon: Minutes) -> Result<HorizonRanking> {
    if phis.is_empty() {
        return Err(Error::precondition("ranking needs at least one evaluation row"));
    }
    let n = phis.len() as f64;
    let mut features: Vec<RankedFeature> = columns
        .iter()
        .enumerate()
        .map(|(j, c)| RankedFeature {
            column: c.clone(),
            mean_abs_phi: phis.iter().map(|p| p[j].abs()).sum::<f64>() / n,
        })
        .collect();
    features.sort_by(|a, b| b.mean_abs_phi.total_cmp(&a.mean_abs_phi).then_with(|| a.column.cmp(&b.column)));
    Ok(HorizonRanking { horizon, features })
}

/// Mean |phi| per column over the rows of `m`.
pub fn rank_features(model: &BoostedEnsemble, m: &FeatureMatrix, horizon: Minutes) -> Result<HorizonRanking> {
    let phis: Vec<Vec<f64>> = explain_rows(model, m)?.into_iter().map(|a| a.phi).collect();
    rank_from_attributions(&m.column_names(), &phis, horizon)
}

pub fn jaccard(a: &[&str], b: &[&str]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub const NOISE_COLUMN: &str = "gaussian_noise";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    pub repeats: usize,
    pub seed: u64,
    pub top_k: usize,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            repeats: 5,
            seed: 42,
            top_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRepeat {
    pub repeat: usize,
    /// Position of the noise column; ties with it are resolved against it.
    pub noise_rank: usize,
    pub jaccard: f64,
    pub top: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub horizon: Minutes,
    pub top_k: usize,
    pub baseline_top: Vec<String>,
    pub repeats: Vec<PerturbationRepeat>,
    pub mean_jaccard: f64,
    pub min_noise_rank: usize,
}

pub(crate) fn with_noise(m: &FeatureMatrix, noise: Vec<f64>) -> Result<FeatureMatrix> {
    m.with_column(
        ColumnDescriptor {
            name: NOISE_COLUMN.into(),
            source: NOISE_COLUMN.into(),
            statistic: None,
            units: String::new(),
            missing_fraction: 0.0,
        },
        &noise,
    )
}

/// Rank of the noise column counting every other column whose importance
/// is at least as large.
pub(crate) fn noise_rank(r: &HorizonRanking) -> usize {
    let noise = r
        .features
        .iter()
        .find(|f| f.column == NOISE_COLUMN)
        .map_or(0.0, |f| f.mean_abs_phi);
    r.features.iter().filter(|f| f.column != NOISE_COLUMN && f.mean_abs_phi >= noise).count() + 1
}

/// Appends a standard-normal column, retrains, and compares rankings on
/// `eval` with the baseline model's.
pub fn perturbation_test(
    train: &FeatureMatrix,
    eval: &FeatureMatrix,
    params: &GbdtParams,
    horizon: Minutes,
    cfg: &PerturbationConfig,
) -> Result<PerturbationReport> {
    if cfg.repeats == 0 {
        return Err(Error::precondition("perturbation test needs at least one repeat"));
    }
    let weights = sample_weights(&train.labels, &class_weights(&train.labels)?);
    let baseline = train_gbdt(train, &train.labels, &weights, params)?;
    let base_rank = rank_features(&baseline, eval, horizon)?;
    let baseline_top: Vec<String> = base_rank.top(cfg.top_k).into_iter().map(String::from).collect();
    let mut repeats = Vec::with_capacity(cfg.repeats);
    for repeat in 0..cfg.repeats {
        let mut r = rng::stream(cfg.seed, "noise", repeat as u64);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut r)).collect() };
        let tr = with_noise(train, draw(train.n_rows()))?;
        let ev = with_noise(eval, draw(eval.n_rows()))?;
        let model = train_gbdt(&tr, &tr.labels, &weights, params)?;
        let ranking = rank_features(&model, &ev, horizon)?;
        let top: Vec<String> = ranking.top(cfg.top_k).into_iter().map(String::from).collect();
        let a: Vec<&str> = baseline_top.iter().map(String::as_str).collect();
        let b: Vec<&str> = top.iter().map(String::as_str).collect();
        repeats.push(PerturbationRepeat {
            repeat,
            noise_rank: noise_rank(&ranking),
            jaccard: jaccard(&a, &b),
            top,
        });
    }
    let mean_jaccard = repeats.iter().map(|r| r.jaccard).sum::<f64>() / repeats.len() as f64;
    let min_noise_rank = repeats.iter().map(|r| r.noise_rank).min().unwrap_or(usize::MAX);
    Ok(PerturbationReport {
        horizon,
        top_k: cfg.top_k,
        baseline_top,
        repeats,
        mean_jaccard,
        min_noise_rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::shap::tests::ensemble_of;
    use crate::model::gbdt::tests::matrix;
    use crate::model::{Tree, TreeNode};
    use rand::Rng as _;

    fn signal_matrix(n: usize, seed: u64) -> FeatureMatrix {
        let mut r = rng::stream(seed, "signal", 0);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut r)).collect();
            let z = 2.0 * row[0] + row[1] + 0.5 * row[2];
            ys.push(r.random::<f64>() < 1.0 / (1.0 + (-z).exp()));
            xs.extend(row);
        }
        matrix(4, xs, ys)
    }

    #[test]
    fn only_used_feature_ranks_first() {
        let t = Tree {
            nodes: vec![
                TreeNode::Split { feature: 3, threshold: 0.0, default_left: true, left: 1, right: 2, cover: 2.0 },
                TreeNode::Leaf { weight: -1.0, cover: 1.0 },
                TreeNode::Leaf { weight: 1.0, cover: 1.0 },
            ],
        };
        let model = ensemble_of(vec![t], 4, 0.0, 1.0);
        let m = matrix(4, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0], vec![true, false]);
        let r = rank_features(&model, &m, 360).unwrap();
        assert_eq!(r.top(4), ["x3", "x0", "x1", "x2"]);
        assert!(r.features[1..].iter().all(|f| f.mean_abs_phi == 0.0));

        let dup = matrix(4, [m.values(), m.values()].concat(), vec![true, false, true, false]);
        assert_eq!(rank_features(&model, &dup, 360).unwrap(), r);
    }

    #[test]
    fn constant_extra_column_ranks_last() {
        let m = signal_matrix(300, 1);
        let aug = with_noise(&m, vec![0.0; 300]).unwrap();
        let w = sample_weights(&aug.labels, &class_weights(&aug.labels).unwrap());
        let model = train_gbdt(&aug, &aug.labels, &w, &GbdtParams { rounds: 20, ..GbdtParams::default() }).unwrap();
        let r = rank_features(&model, &aug, 360).unwrap();
        assert_eq!(r.rank_of(NOISE_COLUMN), Some(5));
        assert_eq!(noise_rank(&r), 5);
    }

    #[test]
    fn perturbation_is_deterministic_and_stable() {
        let m = signal_matrix(600, 2);
        let params = GbdtParams { rounds: 40, ..GbdtParams::default() };
        let cfg = PerturbationConfig { repeats: 3, top_k: 2, ..PerturbationConfig::default() };
        let a = perturbation_test(&m, &m, &params, 720, &cfg).unwrap();
        let b = perturbation_test(&m, &m, &params, 720, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.baseline_top, ["x0", "x1"]);
        assert!(a.min_noise_rank > 2);
        assert_eq!(a.mean_jaccard, 1.0);
        assert!(perturbation_test(&m, &m, &params, 720, &PerturbationConfig { repeats: 0, ..cfg }).is_err());
    }

    #[test]
    fn jaccard_values() {
        assert_eq!(jaccard(&["a", "b"], &["b", "c"]), 1.0 / 3.0);
        assert_eq!(jaccard(&[], &[]), 1.0);
    }
}
