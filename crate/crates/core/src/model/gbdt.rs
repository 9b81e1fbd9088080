//! Second-order gradient boosting of regression trees for weighted log-loss.
//!
//! Trees are grown level by level with exact greedy split search over the
//! sorted distinct values of each column. Missing values (`NaN`) are routed
//! to whichever side gives the larger gain, and that choice is stored as the
//! node's default direction.

use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::window::FeatureMatrix;

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        default_left: bool,
        left: usize,
        right: usize,
        cover: f64,
    },
    Leaf {
        weight: f64,
        cover: f64,
    },
}

impl TreeNode {
    pub fn cover(&self) -> f64 {
        match *self {
            TreeNode::Split { cover, .. } | TreeNode::Leaf { cover, .. } => cover,
        }
    }
}

/// A regression tree stored as a flat node list; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf(weight: f64, cover: f64) -> Self {
        Tree {
            nodes: vec![TreeNode::Leaf { weight, cover }],
        }
    }

    /// Child a value is routed to at a split.
    #[inline]
    pub fn route(value: f64, threshold: f64, default_left: bool, left: usize, right: usize) -> usize {
        if value.is_nan() {
            if default_left {
                left
            } else {
                right
            }
        } else if value < threshold {
            left
        } else {
            right
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { weight, .. } => return weight,
                TreeNode::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                    ..
                } => i = Tree::route(row[feature], threshold, default_left, left, right),
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    pub fn split_features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Split { feature, .. } => Some(*feature),
            TreeNode::Leaf { .. } => None,
        })
    }

    /// Structural checks used after loading a model file.
    pub fn validate(&self, n_features: usize) -> std::result::Result<(), String> {
        if self.nodes.is_empty() {
            return Err("tree has no nodes".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !(n.cover() >= 0.0) {
                return Err(format!("node {i}: negative or NaN cover"));
            }
            match *n {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    if feature >= n_features {
                        return Err(format!("node {i}: feature {feature} out of range"));
                    }
                    if !threshold.is_finite() {
                        return Err(format!("node {i}: non-finite threshold"));
                    }
                    if left <= i || right <= i || left >= self.nodes.len() || right >= self.nodes.len() {
                        return Err(format!("node {i}: bad child index"));
                    }
                }
                TreeNode::Leaf { weight, .. } => {
                    if !weight.is_finite() {
                        return Err(format!("node {i}: non-finite leaf weight"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtParams {
    pub max_depth: usize,
    pub rounds: usize,
    pub eta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
    /// Row fraction drawn per round; 1 disables sampling.
    pub subsample: f64,
    pub seed: u64,
    /// Stop once validation loss has not improved for this many rounds.
    /// Only used by [`train_gbdt_with_validation`].
    #[serde(default)]
    pub early_stopping_rounds: Option<usize>,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams {
            max_depth: 4,
            rounds: 200,
            eta: 0.1,
            lambda: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            subsample: 1.0,
            seed: 0,
            early_stopping_rounds: None,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        let pos = |field: &str, x: f64, strict: bool| -> Result<()> {
            if !x.is_finite() || x < 0.0 || (strict && x == 0.0) {
                Err(Error::config(format!("model.{field}"), format!("invalid value {x}")))
            } else {
                Ok(())
            }
        };
        pos("eta", self.eta, true)?;
        pos("lambda", self.lambda, false)?;
        pos("gamma", self.gamma, false)?;
        pos("min_child_weight", self.min_child_weight, false)?;
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::config("model.subsample", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Trained additive model: `margin = base_score + eta · Σ tree(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedEnsemble {
    pub version: u32,
    pub feature_names: Vec<String>,
    pub base_score: f64,
    pub eta: f64,
    pub trees: Vec<Tree>,
    pub params: GbdtParams,
}

pub fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

fn softplus(m: f64) -> f64 {
    if m > 0.0 {
        m + (-m).exp().ln_1p()
    } else {
        m.exp().ln_1p()
    }
}

/// Weighted mean log-loss at the given margins.
pub fn weighted_log_loss(margins: &[f64], labels: &[bool], weights: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&m, &y), &w) in margins.iter().zip(labels).zip(weights) {
        num += w * (softplus(m) - if y { m } else { 0.0 });
        den += w;
    }
    num / den
}

impl BoostedEnsemble {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn margin_row(&self, row: &[f64]) -> f64 {
        self.base_score + self.eta * self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }

    fn check_arity(&self, m: &FeatureMatrix) -> Result<()> {
        if m.n_cols() != self.n_features() {
            return Err(Error::precondition(format!(
                "model expects {} features, matrix has {}",
                self.n_features(),
                m.n_cols()
            )));
        }
        Ok(())
    }

    pub fn predict_margin(&self, m: &FeatureMatrix) -> Result<Vec<f64>> {
        self.check_arity(m)?;
        Ok((0..m.n_rows())
            .into_par_iter()
            .map(|i| self.margin_row(m.row(i)))
            .collect())
    }

    pub fn predict(&self, m: &FeatureMatrix) -> Result<Vec<f64>> {
        Ok(self.predict_margin(m)?.into_iter().map(sigmoid).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: BoostedEnsemble = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: e.line() as u64,
            reason: e.to_string(),
        })?;
        if model.version != MODEL_VERSION {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("unsupported model version {}", model.version),
            });
        }
        for (t, tree) in model.trees.iter().enumerate() {
            tree.validate(model.n_features()).map_err(|reason| Error::Schema {
                path: path.to_path_buf(),
                line: 0,
                reason: format!("tree {t}: {reason}"),
            })?;
        }
        Ok(model)
    }
}

/// Column-major view of the training rows with each column's non-missing
/// rows presorted by value.
struct Columns {
    n: usize,
    values: Vec<Vec<f64>>,
    sorted: Vec<Vec<u32>>,
    missing: Vec<Vec<u32>>,
}

impl Columns {
    fn new(m: &FeatureMatrix) -> Self {
        let p = m.n_cols();
        let n = m.n_rows();
        let values: Vec<Vec<f64>> = (0..p).map(|j| m.column(j)).collect();
        let (sorted, missing) = values
            .par_iter()
            .map(|col| {
                let mut s: Vec<u32> = (0..n as u32).filter(|&i| !col[i as usize].is_nan()).collect();
                s.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                let miss = (0..n as u32).filter(|&i| col[i as usize].is_nan()).collect();
                (s, miss)
            })
            .unzip();
        Columns {
            n,
            values,
            sorted,
            missing,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    default_left: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct Acc {
    g: f64,
    h: f64,
    last: f64,
    seen: bool,
}

struct Grower<'a> {
    cols: &'a Columns,
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a GbdtParams,
}

impl Grower<'_> {
    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.lambda)
    }

    fn admissible(&self, h: f64) -> bool {
        h > 0.0 && h >= self.params.min_child_weight
    }

    /// Best split per active node for one feature.
    fn scan_feature(&self, j: usize, row_node: &[i32], totals: &[(f64, f64)]) -> Vec<Option<Candidate>> {
        let k = totals.len();
        let mut miss = vec![(0.0, 0.0); k];
        for &r in &self.cols.missing[j] {
            let a = row_node[r as usize];
            if a >= 0 {
                let e = &mut miss[a as usize];
                e.0 += self.grad[r as usize];
                e.1 += self.hess[r as usize];
            }
        }
        let parent: Vec<f64> = totals.iter().map(|&(g, h)| self.score(g, h)).collect();
        let mut acc = vec![Acc::default(); k];
        let mut best: Vec<Option<Candidate>> = vec![None; k];
        let col = &self.cols.values[j];
        for &r in &self.cols.sorted[j] {
            let a = row_node[r as usize];
            if a < 0 {
                continue;
            }
            let a = a as usize;
            let v = col[r as usize];
            let st = acc[a];
            if st.seen && v > st.last {
                let (gt, ht) = totals[a];
                let (gm, hm) = miss[a];
                let (gnm, hnm) = (gt - gm, ht - hm);
                let (gl, hl) = (st.g, st.h);
                let (gr, hr) = (gnm - gl, hnm - hl);
                let mut threshold = st.last / 2.0 + v / 2.0;
                if threshold <= st.last {
                    threshold = v;
                }
                for default_left in [true, false] {
                    let (gl2, hl2, gr2, hr2) = if default_left {
                        (gl + gm, hl + hm, gr, hr)
                    } else {
                        (gl, hl, gr + gm, hr + hm)
                    };
                    if !self.admissible(hl2) || !self.admissible(hr2) {
                        continue;
                    }
                    let gain = 0.5 * (self.score(gl2, hl2) + self.score(gr2, hr2) - parent[a])
                        - self.params.gamma;
                    if best[a].is_none_or(|b| gain > b.gain) {
                        best[a] = Some(Candidate {
                            gain,
                            feature: j,
                            threshold,
                            default_left,
                        });
                    }
                }
            }
            let e = &mut acc[a];
            e.g += self.grad[r as usize];
            e.h += self.hess[r as usize];
            e.last = v;
            e.seen = true;
        }
        best
    }

    fn grow(&self, sampled: &[bool]) -> Tree {
        let n = self.cols.n;
        let p = self.cols.values.len();
        let mut nodes: Vec<TreeNode> = Vec::new();
        let mut row_node: Vec<i32> = vec![-1; n];
        let (mut g0, mut h0) = (0.0, 0.0);
        for r in 0..n {
            if sampled[r] {
                row_node[r] = 0;
                g0 += self.grad[r];
                h0 += self.hess[r];
            }
        }
        // Active nodes of the current level: (node index, G, H).
        let mut active: Vec<(usize, f64, f64)> = vec![(0, g0, h0)];
        nodes.push(TreeNode::Leaf { weight: 0.0, cover: h0 });
        let mut depth = 0;
        while !active.is_empty() {
            let totals: Vec<(f64, f64)> = active.iter().map(|&(_, g, h)| (g, h)).collect();
            let best: Vec<Option<Candidate>> = if depth >= self.params.max_depth {
                vec![None; active.len()]
            } else {
                let per_feature: Vec<Vec<Option<Candidate>>> = (0..p)
                    .into_par_iter()
                    .map(|j| self.scan_feature(j, &row_node, &totals))
                    .collect();
                (0..active.len())
                    .map(|a| {
                        per_feature.iter().fold(None, |acc: Option<Candidate>, f| match (acc, f[a]) {
                            (None, c) => c,
                            (Some(b), Some(c)) if c.gain > b.gain => Some(c),
                            (b, _) => b,
                        })
                    })
                    .collect()
            };

            let mut next: Vec<(usize, f64, f64)> = Vec::new();
            // Maps active slot to (left slot, right slot) in `next`.
            let mut child_slots: Vec<Option<(usize, usize, Candidate)>> = vec![None; active.len()];
            for (a, &(node, g, h)) in active.iter().enumerate() {
                match best[a].filter(|c| c.gain > 0.0) {
                    Some(c) => {
                        let left = nodes.len();
                        nodes.push(TreeNode::Leaf { weight: 0.0, cover: 0.0 });
                        nodes.push(TreeNode::Leaf { weight: 0.0, cover: 0.0 });
                        nodes[node] = TreeNode::Split {
                            feature: c.feature,
                            threshold: c.threshold,
                            default_left: c.default_left,
                            left,
                            right: left + 1,
                            cover: h,
                        };
                        child_slots[a] = Some((next.len(), next.len() + 1, c));
                        next.push((left, 0.0, 0.0));
                        next.push((left + 1, 0.0, 0.0));
                    }
                    None => {
                        nodes[node] = TreeNode::Leaf {
                            weight: -g / (h + self.params.lambda),
                            cover: h,
                        };
                    }
                }
            }
            for r in 0..n {
                let a = row_node[r];
                if a < 0 {
                    continue;
                }
                match child_slots[a as usize] {
                    Some((ls, rs, c)) => {
                        let v = self.cols.values[c.feature][r];
                        let slot = Tree::route(v, c.threshold, c.default_left, ls, rs);
                        row_node[r] = slot as i32;
                        next[slot].1 += self.grad[r];
                        next[slot].2 += self.hess[r];
                    }
                    None => row_node[r] = -1,
                }
            }
            active = next;
            depth += 1;
        }
        // Internal covers are the exact sum of their children's.
        for i in (0..nodes.len()).rev() {
            if let TreeNode::Split { left, right, .. } = nodes[i] {
                let c = nodes[left].cover() + nodes[right].cover();
                if let TreeNode::Split { cover, .. } = &mut nodes[i] {
                    *cover = c;
                }
            }
        }
        Tree { nodes }
    }
}

/// Per-round training log-loss, index 0 being the initial model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
}

fn check_inputs(m: &FeatureMatrix, labels: &[bool], weights: &[f64], params: &GbdtParams) -> Result<()> {
    params.validate()?;
    if m.n_rows() < 2 {
        return Err(Error::precondition("boosting needs at least two rows"));
    }
    if labels.len() != m.n_rows() || weights.len() != m.n_rows() {
        return Err(Error::precondition("labels/weights length differs from row count"));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::precondition("sample weights must be finite and non-negative"));
    }
    if m.values().iter().any(|v| v.is_infinite()) {
        return Err(Error::precondition("feature values must be finite or missing"));
    }
    Ok(())
}

/// Trains a boosted ensemble on `m`.
pub fn train_gbdt(m: &FeatureMatrix, labels: &[bool], weights: &[f64], params: &GbdtParams) -> Result<BoostedEnsemble> {
    train_gbdt_traced(m, labels, weights, params).map(|(model, _)| model)
}

pub fn train_gbdt_traced(
    m: &FeatureMatrix,
    labels: &[bool],
    weights: &[f64],
    params: &GbdtParams,
) -> Result<(BoostedEnsemble, TrainTrace)> {
    boost(m, labels, weights, params, None)
}

/// Trains with a validation set. With `early_stopping_rounds` set, stops
/// once validation loss has stalled that long and truncates to the best
/// round.
pub fn train_gbdt_with_validation(
    m: &FeatureMatrix,
    labels: &[bool],
    weights: &[f64],
    validation: (&FeatureMatrix, &[bool], &[f64]),
    params: &GbdtParams,
) -> Result<(BoostedEnsemble, TrainTrace)> {
    if validation.0.n_cols() != m.n_cols() {
        return Err(Error::precondition("validation arity differs from training arity"));
    }
    boost(m, labels, weights, params, Some(validation))
}

fn boost(
    m: &FeatureMatrix,
    labels: &[bool],
    weights: &[f64],
    params: &GbdtParams,
    validation: Option<(&FeatureMatrix, &[bool], &[f64])>,
) -> Result<(BoostedEnsemble, TrainTrace)> {
    check_inputs(m, labels, weights, params)?;
    let n = m.n_rows();
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::precondition("sample weights sum to zero"));
    }
    let wpos: f64 = labels.iter().zip(weights).filter(|(y, _)| **y).map(|(_, w)| w).sum();
    let prevalence = (wpos / wsum).clamp(1e-6, 1.0 - 1e-6);
    let base_score = (prevalence / (1.0 - prevalence)).ln();

    let cols = Columns::new(m);
    let mut margins = vec![base_score; n];
    let mut trace = TrainTrace {
        train_loss: vec![weighted_log_loss(&margins, labels, weights)],
        validation_loss: Vec::new(),
    };
    let mut val_margins = validation.map(|(v, _, _)| vec![base_score; v.n_rows()]);
    if let (Some((_, vy, vw)), Some(vm)) = (validation, &val_margins) {
        trace.validation_loss.push(weighted_log_loss(vm, vy, vw));
    }
    let mut best_round = 0;
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut trees = Vec::with_capacity(params.rounds);
    for round in 0..params.rounds {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            let y = if labels[i] { 1.0 } else { 0.0 };
            grad[i] = weights[i] * (p - y);
            hess[i] = weights[i] * p * (1.0 - p);
            if !grad[i].is_finite() || !hess[i].is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at round {round}")));
            }
        }
        let sampled: Vec<bool> = if params.subsample < 1.0 {
            let mut r = rng::stream(params.seed, "subsample", round as u64);
            (0..n).map(|_| r.random::<f64>() < params.subsample).collect()
        } else {
            vec![true; n]
        };
        let tree = Grower {
            cols: &cols,
            grad: &grad,
            hess: &hess,
            params,
        }
        .grow(&sampled);
        for (i, mi) in margins.iter_mut().enumerate() {
            *mi += params.eta * tree.predict(m.row(i));
        }
        if margins.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite margin at round {round}")));
        }
        trace.train_loss.push(weighted_log_loss(&margins, labels, weights));
        if let (Some((v, vy, vw)), Some(vm)) = (validation, val_margins.as_mut()) {
            for (i, mi) in vm.iter_mut().enumerate() {
                *mi += params.eta * tree.predict(v.row(i));
            }
            let loss = weighted_log_loss(vm, vy, vw);
            trace.validation_loss.push(loss);
            if loss < trace.validation_loss[best_round] {
                best_round = round + 1;
            }
        }
        trees.push(tree);
        if let (Some(patience), true) = (params.early_stopping_rounds, validation.is_some()) {
            if round + 1 - best_round >= patience {
                trees.truncate(best_round);
                break;
            }
        }
    }
    Ok((
        BoostedEnsemble {
            version: MODEL_VERSION,
            feature_names: m.column_names(),
            base_score,
            eta: params.eta,
            trees,
            params: params.clone(),
        },
        trace,
    ))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::cohort::Sex;
    use crate::window::{ColumnDescriptor, GroupTags};

    pub(crate) fn matrix(p: usize, values: Vec<f64>, labels: Vec<bool>) -> FeatureMatrix {
        let n = labels.len();
        FeatureMatrix::new(
            (0..n).map(|i| format!("r{i:05}")).collect(),
            (0..p)
                .map(|j| ColumnDescriptor {
                    name: format!("x{j}"),
                    source: format!("x{j}"),
                    statistic: None,
                    units: String::new(),
                    missing_fraction: 0.0,
                })
                .collect(),
            values,
            labels,
            vec![GroupTags { sex: Sex::Male, ethnicity: String::new() }; n],
        )
        .unwrap()
    }

    fn separable() -> FeatureMatrix {
        let xs: Vec<f64> = (-20..20).map(|i| i as f64 + 0.5).collect();
        let ys = xs.iter().map(|&x| x > 0.0).collect();
        matrix(1, xs, ys)
    }

    #[test]
    fn zero_rounds_predicts_base_rate() {
        let m = separable();
        let params = GbdtParams { rounds: 0, ..GbdtParams::default() };
        let model = train_gbdt(&m, &m.labels, &vec![1.0; 40], &params).unwrap();
        assert!(model.trees.is_empty());
        for p in model.predict(&m).unwrap() {
            assert_eq!(p, sigmoid(model.base_score));
        }
    }

    #[test]
    fn stump_separates_one_dimensional_data() {
        let m = separable();
        let params = GbdtParams { max_depth: 1, rounds: 10, ..GbdtParams::default() };
        let model = train_gbdt(&m, &m.labels, &vec![1.0; 40], &params).unwrap();
        let p = model.predict(&m).unwrap();
        assert_eq!(crate::metrics::auroc(&p, &m.labels).unwrap(), 1.0);
        match model.trees[0].nodes[0] {
            TreeNode::Split { threshold, .. } => assert_eq!(threshold, 0.0),
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn all_positive_labels_push_leaves_up() {
        let m = separable();
        let y = vec![true; 40];
        let params = GbdtParams { rounds: 1, ..GbdtParams::default() };
        let model = train_gbdt(&m, &y, &vec![1.0; 40], &params).unwrap();
        for n in &model.trees[0].nodes {
            if let TreeNode::Leaf { weight, .. } = n {
                assert!(*weight >= 0.0);
            }
        }
        let base = sigmoid(model.base_score);
        assert!(model.predict(&m).unwrap().iter().all(|&p| p > base));
    }

    #[test]
    fn missing_value_follows_default_direction() {
        let nan = f64::NAN;
        let mut xs: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let mut ys: Vec<bool> = (0..30).map(|i| i >= 15).collect();
        // Missing rows are all positive, so they should go right.
        xs.extend([nan; 6]);
        ys.extend([true; 6]);
        let m = matrix(1, xs, ys);
        let params = GbdtParams { max_depth: 1, rounds: 1, ..GbdtParams::default() };
        let model = train_gbdt(&m, &m.labels, &vec![1.0; 36], &params).unwrap();
        let TreeNode::Split { default_left, threshold, .. } = model.trees[0].nodes[0] else {
            panic!("expected a split");
        };
        assert!(!default_left);
        assert_eq!(threshold, 14.5);
        let with_nan = model.margin_row(&[nan]);
        assert_eq!(with_nan, model.margin_row(&[20.0]));
    }

    #[test]
    fn constant_column_never_split() {
        let n = 50;
        let mut values = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            values.push(3.0);
            values.push(i as f64);
            y.push(i % 3 == 0);
        }
        let m = matrix(2, values, y);
        let model = train_gbdt(&m, &m.labels, &vec![1.0; n], &GbdtParams { rounds: 20, ..GbdtParams::default() }).unwrap();
        assert!(model.trees.iter().flat_map(|t| t.split_features()).all(|f| f == 1));
    }

    #[test]
    fn stump_prediction_closed_form() {
        let model = BoostedEnsemble {
            version: MODEL_VERSION,
            feature_names: vec!["x0".into()],
            base_score: 0.0,
            eta: 1.0,
            trees: vec![Tree {
                nodes: vec![
                    TreeNode::Split { feature: 0, threshold: 0.0, default_left: true, left: 1, right: 2, cover: 2.0 },
                    TreeNode::Leaf { weight: -1.0, cover: 1.0 },
                    TreeNode::Leaf { weight: 2.0, cover: 1.0 },
                ],
            }],
            params: GbdtParams::default(),
        };
        let m = matrix(1, vec![1.0], vec![true]);
        let p = model.predict(&m).unwrap()[0];
        assert!((p - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert_eq!(sigmoid(0.0), 0.5);
        let bad = matrix(2, vec![1.0, 2.0], vec![true]);
        assert!(model.predict(&bad).is_err());
    }

    #[test]
    fn save_load_reproduces_predictions() {
        let m = separable();
        let params = GbdtParams { rounds: 5, ..GbdtParams::default() };
        let model = train_gbdt(&m, &m.labels, &vec![1.0; 40], &params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        model.save(&p).unwrap();
        let back = BoostedEnsemble::load(&p).unwrap();
        assert_eq!(back, model);
        let a = model.predict_margin(&m).unwrap();
        let b = back.predict_margin(&m).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn early_stopping_truncates() {
        let m = separable();
        let w = vec![1.0; 40];
        // Validation labels disagree with training, so loss rises right away.
        let flipped: Vec<bool> = m.labels.iter().map(|y| !y).collect();
        let params = GbdtParams { rounds: 50, early_stopping_rounds: Some(3), ..GbdtParams::default() };
        let (model, trace) = train_gbdt_with_validation(&m, &m.labels, &w, (&m, &flipped, &w), &params).unwrap();
        assert!(model.trees.is_empty());
        assert_eq!(trace.validation_loss.len(), 4);
    }
}
