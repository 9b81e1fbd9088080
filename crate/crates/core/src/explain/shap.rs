//! Shapley attributions under the cover-weighted tree-path value function.
//!
//! `tree_shap` is the polynomial path algorithm; `brute_force_shap`
//! enumerates feature subsets directly and exists to check it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoostedEnsemble, Tree, TreeNode};
use crate::window::FeatureMatrix;

pub const BRUTE_FORCE_MAX_FEATURES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    /// Expected margin with no feature known.
    pub base_value: f64,
    /// Per-column contributions in log-odds units.
    pub phi: Vec<f64>,
}

impl Attribution {
    pub fn total(&self) -> f64 {
        self.base_value + self.phi.iter().sum::<f64>()
    }
}

fn check(model: &BoostedEnsemble, sample: &[f64]) -> Result<()> {
    if sample.len() != model.n_features() {
        return Err(Error::precondition(format!(
            "sample has {} values, model expects {}",
            sample.len(),
            model.n_features()
        )));
    }
    for (t, tree) in model.trees.iter().enumerate() {
        if !(tree.nodes[0].cover() > 0.0) {
            return Err(Error::precondition(format!("tree {t} has zero cover at its root")));
        }
    }
    Ok(())
}

/// Child the sample takes and the one it does not.
fn hot_cold(tree: &Tree, node: usize, x: &[f64]) -> Option<(usize, usize, usize)> {
    match tree.nodes[node] {
        TreeNode::Leaf { .. } => None,
        TreeNode::Split {
            feature,
            threshold,
            default_left,
            left,
            right,
            ..
        } => {
            let hot = Tree::route(x[feature], threshold, default_left, left, right);
            let cold = if hot == left { right } else { left };
            Some((feature, hot, cold))
        }
    }
}

/// Expected output of a tree when only features in `known` are observed.
fn tree_value(tree: &Tree, node: usize, x: &[f64], known: &dyn Fn(usize) -> bool) -> f64 {
    match tree.nodes[node] {
        TreeNode::Leaf { weight, .. } => weight,
        TreeNode::Split { feature, left, right, cover, .. } => {
            if known(feature) {
                let (_, hot, _) = hot_cold(tree, node, x).unwrap();
                tree_value(tree, hot, x, known)
            } else {
                let cl = tree.nodes[left].cover();
                let cr = tree.nodes[right].cover();
                (cl * tree_value(tree, left, x, known) + cr * tree_value(tree, right, x, known)) / cover
            }
        }
    }
}

fn expected_value(tree: &Tree) -> f64 {
    tree_value(tree, 0, &[], &|_| false)
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: Option<usize>,
    zero_fraction: f64,
    one_fraction: f64,
    pweight: f64,
}

fn extend_path(path: &mut [PathElement], depth: usize, zero_fraction: f64, one_fraction: f64, feature: Option<usize>) {
    path[depth] = PathElement {
        feature,
        zero_fraction,
        one_fraction,
        pweight: if depth == 0 { 1.0 } else { 0.0 },
    };
    let d1 = (depth + 1) as f64;
    for i in (0..depth).rev() {
        path[i + 1].pweight += one_fraction * path[i].pweight * (i + 1) as f64 / d1;
        path[i].pweight = zero_fraction * path[i].pweight * (depth - i) as f64 / d1;
    }
}

fn unwind_path(path: &mut [PathElement], depth: usize, index: usize) {
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let d1 = (depth + 1) as f64;
    let mut next_one = path[depth].pweight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].pweight;
            path[i].pweight = next_one * d1 / ((i + 1) as f64 * one);
            next_one = tmp - path[i].pweight * zero * (depth - i) as f64 / d1;
        } else {
            path[i].pweight = path[i].pweight * d1 / (zero * (depth - i) as f64);
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
}

fn unwound_path_sum(path: &[PathElement], depth: usize, index: usize) -> f64 {
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let d1 = (depth + 1) as f64;
    let mut next_one = path[depth].pweight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = next_one * d1 / ((i + 1) as f64 * one);
            total += tmp;
            next_one = path[i].pweight - tmp * zero * (depth - i) as f64 / d1;
        } else {
            total += path[i].pweight / zero / ((depth - i) as f64 / d1);
        }
    }
    total
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    tree: &Tree,
    node: usize,
    x: &[f64],
    phi: &mut [f64],
    parent: &[PathElement],
    depth: usize,
    zero_fraction: f64,
    one_fraction: f64,
    feature: Option<usize>,
) {
    let mut path = parent.to_vec();
    path.push(PathElement { feature: None, zero_fraction: 0.0, one_fraction: 0.0, pweight: 0.0 });
    extend_path(&mut path, depth, zero_fraction, one_fraction, feature);
    match tree.nodes[node] {
        TreeNode::Leaf { weight, .. } => {
            for i in 1..=depth {
                let w = unwound_path_sum(&path, depth, i);
                let el = path[i];
                phi[el.feature.expect("path element past the root has a feature")] +=
                    w * (el.one_fraction - el.zero_fraction) * weight;
            }
        }
        TreeNode::Split { cover, .. } => {
            let (split, hot, cold) = hot_cold(tree, node, x).unwrap();
            let hot_zero = tree.nodes[hot].cover() / cover;
            let cold_zero = tree.nodes[cold].cover() / cover;
            let mut incoming_zero = 1.0;
            let mut incoming_one = 1.0;
            let mut depth = depth;
            if let Some(k) = (1..=depth).find(|&k| path[k].feature == Some(split)) {
                incoming_zero = path[k].zero_fraction;
                incoming_one = path[k].one_fraction;
                unwind_path(&mut path, depth, k);
                depth -= 1;
                path.truncate(depth + 1);
            }
            recurse(tree, hot, x, phi, &path, depth + 1, hot_zero * incoming_zero, incoming_one, Some(split));
            recurse(tree, cold, x, phi, &path, depth + 1, cold_zero * incoming_zero, 0.0, Some(split));
        }
    }
}

/// Attribution of one tree's raw output (before the learning rate).
pub fn tree_shap_single(tree: &Tree, x: &[f64], n_features: usize) -> Attribution {
    let mut phi = vec![0.0; n_features];
    recurse(tree, 0, x, &mut phi, &[], 0, 1.0, 1.0, None);
    Attribution {
        base_value: expected_value(tree),
        phi,
    }
}

fn ensemble(model: &BoostedEnsemble, per_tree: impl Fn(&Tree) -> Attribution) -> Attribution {
    let mut phi = vec![0.0; model.n_features()];
    let mut base = 0.0;
    for tree in &model.trees {
        let a = per_tree(tree);
        base += a.base_value;
        for (p, v) in phi.iter_mut().zip(&a.phi) {
            *p += v;
        }
    }
    Attribution {
        base_value: model.base_score + model.eta * base,
        phi: phi.into_iter().map(|p| model.eta * p).collect(),
    }
}

/// Exact attribution of the ensemble margin for one sample.
pub fn tree_shap(model: &BoostedEnsemble, sample: &[f64]) -> Result<Attribution> {
    check(model, sample)?;
    Ok(ensemble(model, |t| tree_shap_single(t, sample, model.n_features())))
}

/// Attributions for every row of a matrix, in row order.
pub fn explain_rows(model: &BoostedEnsemble, m: &FeatureMatrix) -> Result<Vec<Attribution>> {
    if m.n_cols() != model.n_features() {
        return Err(Error::precondition("matrix arity differs from model arity"));
    }
    (0..m.n_rows()).into_par_iter().map(|i| tree_shap(model, m.row(i))).collect()
}

/// Shapley values by direct enumeration of all feature subsets.
pub fn brute_force_shap(model: &BoostedEnsemble, sample: &[f64]) -> Result<Attribution> {
    check(model, sample)?;
    let d = model.n_features();
    if d > BRUTE_FORCE_MAX_FEATURES {
        return Err(Error::precondition(format!(
            "brute-force Shapley is limited to {BRUTE_FORCE_MAX_FEATURES} features, model has {d}"
        )));
    }
    let fact: Vec<f64> = (0..=d).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    }).collect();
    Ok(ensemble(model, |tree| {
        let v = |mask: u32| tree_value(tree, 0, sample, &|f| mask & (1 << f) != 0);
        let values: Vec<f64> = (0..1u32 << d).map(v).collect();
        let mut phi = vec![0.0; d];
        for (i, p) in phi.iter_mut().enumerate() {
            for s in 0..1u32 << d {
                if s & (1 << i) != 0 {
                    continue;
                }
                let size = s.count_ones() as usize;
                let w = fact[size] * fact[d - size - 1] / fact[d];
                *p += w * (values[(s | (1 << i)) as usize] - values[s as usize]);
            }
        }
        Attribution { base_value: values[0], phi }
    }))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{GbdtParams, MODEL_VERSION};
    use proptest::prelude::*;

    pub(crate) fn ensemble_of(trees: Vec<Tree>, n_features: usize, base: f64, eta: f64) -> BoostedEnsemble {
        BoostedEnsemble {
            version: MODEL_VERSION,
            feature_names: (0..n_features).map(|j| format!("x{j}")).collect(),
            base_score: base,
            eta,
            trees,
            params: GbdtParams::default(),
        }
    }

    fn stump() -> Tree {
        Tree {
            nodes: vec![
                TreeNode::Split { feature: 0, threshold: 0.0, default_left: true, left: 1, right: 2, cover: 1.0 },
                TreeNode::Leaf { weight: -1.0, cover: 0.5 },
                TreeNode::Leaf { weight: 1.0, cover: 0.5 },
            ],
        }
    }

    #[test]
    fn stump_attribution() {
        let m = ensemble_of(vec![stump()], 2, 0.0, 1.0);
        let a = tree_shap(&m, &[1.0, 5.0]).unwrap();
        assert_eq!(a.base_value, 0.0);
        assert_eq!(a.phi, vec![1.0, 0.0]);
        assert_eq!(brute_force_shap(&m, &[1.0, 5.0]).unwrap(), a);
    }

    #[test]
    fn empty_ensemble() {
        let m = ensemble_of(vec![], 3, -1.5, 0.1);
        let a = tree_shap(&m, &[0.0; 3]).unwrap();
        assert_eq!((a.base_value, a.phi), (-1.5, vec![0.0; 3]));
    }

    #[test]
    fn and_tree_is_symmetric() {
        let t = Tree {
            nodes: vec![
                TreeNode::Split { feature: 0, threshold: 0.5, default_left: true, left: 1, right: 2, cover: 4.0 },
                TreeNode::Split { feature: 1, threshold: 0.5, default_left: true, left: 3, right: 4, cover: 2.0 },
                TreeNode::Split { feature: 1, threshold: 0.5, default_left: true, left: 5, right: 6, cover: 2.0 },
                TreeNode::Leaf { weight: 0.0, cover: 1.0 },
                TreeNode::Leaf { weight: 0.0, cover: 1.0 },
                TreeNode::Leaf { weight: 0.0, cover: 1.0 },
                TreeNode::Leaf { weight: 1.0, cover: 1.0 },
            ],
        };
        let m = ensemble_of(vec![t], 2, 0.0, 1.0);
        let a = brute_force_shap(&m, &[1.0, 1.0]).unwrap();
        assert_eq!(a.phi[0], a.phi[1]);
        assert!((a.phi[0] - 0.375).abs() < 1e-15);
        let b = tree_shap(&m, &[1.0, 1.0]).unwrap();
        assert!((b.phi[0] - 0.375).abs() < 1e-12 && (b.phi[1] - 0.375).abs() < 1e-12);
    }

    #[test]
    fn zero_root_cover_rejected() {
        let t = Tree::leaf(1.0, 0.0);
        let m = ensemble_of(vec![t], 1, 0.0, 1.0);
        assert!(tree_shap(&m, &[0.0]).is_err());
    }

    #[test]
    fn brute_force_feature_guard() {
        let m = ensemble_of(vec![stump()], 21, 0.0, 1.0);
        assert!(brute_force_shap(&m, &[0.0; 21]).is_err());
    }

    /// Random tree with positive covers, at most `depth` levels, features
    /// drawn from `0..p` (repeats along a path allowed).
    pub(crate) fn random_tree(p: usize, depth: usize) -> impl Strategy<Value = Tree> {
        let leaf = (-2.0f64..2.0, 0.1f64..5.0).prop_map(|(w, c)| Tree::leaf(w, c));
        leaf.prop_recursive(depth as u32, 1 << depth, 2, move |inner| {
            (0..p, -1.0f64..1.0, any::<bool>(), inner.clone(), inner).prop_map(|(f, t, dl, l, r)| {
                let mut nodes = vec![TreeNode::Leaf { weight: 0.0, cover: 0.0 }];
                let shift = |tree: Tree, offset: usize| -> Vec<TreeNode> {
                    tree.nodes
                        .into_iter()
                        .map(|n| match n {
                            TreeNode::Split { feature, threshold, default_left, left, right, cover } => TreeNode::Split {
                                feature,
                                threshold,
                                default_left,
                                left: left + offset,
                                right: right + offset,
                                cover,
                            },
                            leaf => leaf,
                        })
                        .collect()
                };
                let cover = l.nodes[0].cover() + r.nodes[0].cover();
                let left = 1;
                let right = 1 + l.nodes.len();
                nodes.extend(shift(l, left));
                nodes.extend(shift(r, right));
                nodes[0] = TreeNode::Split { feature: f, threshold: t, default_left: dl, left, right, cover };
                Tree { nodes }
            })
        })
    }

    fn sample(p: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![9 => -1.5f64..1.5, 1 => Just(f64::NAN)], p)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matches_brute_force(
            (trees, x) in (1usize..=6).prop_flat_map(|p| (prop::collection::vec(random_tree(p, 4), 1..=10), sample(p)))
        ) {
            let p = x.len();
            let m = ensemble_of(trees, p, 0.3, 0.1);
            let fast = tree_shap(&m, &x).unwrap();
            let slow = brute_force_shap(&m, &x).unwrap();
            prop_assert!((fast.base_value - slow.base_value).abs() < 1e-9);
            for j in 0..p {
                prop_assert!((fast.phi[j] - slow.phi[j]).abs() < 1e-9);
            }
            prop_assert!((fast.total() - m.margin_row(&x)).abs() < 1e-9);
        }

        #[test]
        fn additive_over_trees(a in random_tree(4, 3), b in random_tree(4, 3), x in sample(4)) {
            let both = tree_shap(&ensemble_of(vec![a.clone(), b.clone()], 4, 0.0, 1.0), &x).unwrap();
            let sa = tree_shap(&ensemble_of(vec![a], 4, 0.0, 1.0), &x).unwrap();
            let sb = tree_shap(&ensemble_of(vec![b], 4, 0.0, 1.0), &x).unwrap();
            for j in 0..4 {
                prop_assert!((both.phi[j] - sa.phi[j] - sb.phi[j]).abs() < 1e-12);
            }
        }
    }
}
