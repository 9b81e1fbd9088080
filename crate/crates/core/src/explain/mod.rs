//! Shapley attributions, per-horizon feature rankings and the noise-column
//! robustness check.

mod ranking;
mod shap;

pub use ranking::{
    jaccard, perturbation_test, rank_features, rank_from_attributions, HorizonRanking, PerturbationConfig,
    PerturbationRepeat, PerturbationReport, RankedFeature, NOISE_COLUMN,
};
pub use shap::{brute_force_shap, explain_rows, tree_shap, tree_shap_single, Attribution, BRUTE_FORCE_MAX_FEATURES};
