//! End-to-end composition: inclusion, windowing, preprocessing, training
//! and scoring for each horizon on one shared stay universe.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{filter_sparse_variables, ExclusionTally, InclusionRules, Minutes, PatientStay, SparsityThresholds, VariableManifest};
use crate::error::{Error, Result};
use crate::explain::{rank_features, HorizonRanking};
use crate::metrics::{self, bootstrap_ci, BootstrapConfig, GroupReport, MetricReport, UncertaintyBand};
use crate::model::{
    class_weights, sample_weights, train_gbdt, train_logistic, BoostedEnsemble, GbdtParams, LogisticConfig, LogisticModel,
};
use crate::preprocess::{
    fit_imputer, fit_standardizer, impute, standardize, stratified_split, ImputerConfig, ImputerState, SplitPlan,
    StandardizerState,
};
use crate::temporal::HorizonPredictions;
use crate::window::{build_matrix_with_schema, FeatureMatrix, MatrixSchema, Statistic, WindowConfig, DEFAULT_HORIZONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub horizons: Vec<Minutes>,
    pub statistics: Vec<Statistic>,
    pub min_points_for_std: usize,
    pub inclusion: InclusionRules,
    pub sparsity: SparsityThresholds,
    pub split: SplitPlan,
    pub imputer: ImputerConfig,
    pub model: GbdtParams,
    pub logistic: LogisticConfig,
    pub threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            horizons: DEFAULT_HORIZONS.to_vec(),
            statistics: vec![Statistic::Mean, Statistic::Std],
            min_points_for_std: 1,
            inclusion: InclusionRules::default(),
            sparsity: SparsityThresholds::default(),
            split: SplitPlan::default(),
            imputer: ImputerConfig::default(),
            model: GbdtParams::default(),
            logistic: LogisticConfig::default(),
            threshold: metrics::DEFAULT_THRESHOLD,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() {
            return Err(Error::config("pipeline.horizons", "at least one horizon is required"));
        }
        if self.horizons.contains(&0) {
            return Err(Error::config("pipeline.horizons", "horizons must be positive"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("pipeline.threshold", "must lie in [0, 1]"));
        }
        self.split.validate()?;
        self.model.validate()?;
        self.window(self.horizons[0]).validate()
    }

    pub fn window(&self, horizon: Minutes) -> WindowConfig {
        WindowConfig {
            horizon,
            statistics: self.statistics.clone(),
            min_points_for_std: self.min_points_for_std,
        }
    }

    /// Horizons sorted farthest first, without duplicates.
    pub fn horizons_far_to_near(&self) -> Vec<Minutes> {
        let mut hs = self.horizons.clone();
        hs.sort_unstable_by(|a, b| b.cmp(a));
        hs.dedup();
        hs
    }
}

/// Stays eligible at the farthest horizon (and therefore at every nearer
/// one), sorted by id, with one stratified train/test partition.
#[derive(Debug, Clone)]
pub struct Universe {
    pub stays: Vec<PatientStay>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Exclusion counts had each horizon been selected on its own.
    pub tallies: Vec<(Minutes, ExclusionTally)>,
    pub variables: Vec<String>,
}

impl Universe {
    pub fn train_stays(&self) -> Vec<PatientStay> {
        self.train.iter().map(|&i| self.stays[i].clone()).collect()
    }

    pub fn test_stays(&self) -> Vec<PatientStay> {
        self.test.iter().map(|&i| self.stays[i].clone()).collect()
    }

    pub fn test_ids(&self) -> Vec<&str> {
        self.test.iter().map(|&i| self.stays[i].stay_id.as_str()).collect()
    }
}

pub fn select_universe(cohort: &[PatientStay], manifest: &VariableManifest, cfg: &PipelineConfig) -> Result<Universe> {
    cfg.validate()?;
    let hs = cfg.horizons_far_to_near();
    let tallies: Vec<(Minutes, ExclusionTally)> = hs
        .iter()
        .map(|&h| cfg.inclusion.apply(cohort, h).map(|(_, t)| (h, t)))
        .collect::<Result<_>>()?;
    let (mut stays, _) = cfg.inclusion.apply(cohort, hs[0])?;
    stays.sort_by(|a, b| a.stay_id.cmp(&b.stay_id));
    let labels: Vec<bool> = stays.iter().map(|s| s.died).collect();
    if !labels.iter().any(|&y| y) || labels.iter().all(|&y| y) {
        return Err(Error::precondition(format!(
            "{} eligible stays do not contain both outcomes",
            stays.len()
        )));
    }
    let (train, test) = stratified_split(&labels, &cfg.split)?;
    let train_stays: Vec<PatientStay> = train.iter().map(|&i| stays[i].clone()).collect();
    let variables = filter_sparse_variables(&train_stays, manifest, cfg.sparsity)?;
    if variables.is_empty() {
        return Err(Error::precondition("no variable passes the sparsity filter"));
    }
    Ok(Universe {
        stays,
        train,
        test,
        tallies,
        variables,
    })
}

/// Everything fitted for one horizon. All states come from `train` rows.
#[derive(Debug, Clone)]
pub struct HorizonFit {
    pub horizon: Minutes,
    pub schema: MatrixSchema,
    /// Column subset used for fitting, in schema order; `None` keeps all.
    pub selected: Option<Vec<String>>,
    pub imputer: ImputerState,
    pub standardizer: StandardizerState,
    pub model: BoostedEnsemble,
    pub logistic: LogisticModel,
    /// Imputed training rows.
    pub train: FeatureMatrix,
    /// Imputed evaluation rows, absent when fitting on the full cohort.
    pub test: Option<FeatureMatrix>,
    pub test_scores: Vec<f64>,
    pub comparator_scores: Vec<f64>,
}

impl HorizonFit {
    /// Scores another cohort with the fitted states, encoding it with the
    /// training schema. Returns the imputed matrix and both score vectors.
    pub fn score(&self, stays: &[PatientStay], cfg: &PipelineConfig) -> Result<(FeatureMatrix, Vec<f64>, Vec<f64>)> {
        let raw = build_matrix_with_schema(stays, &cfg.window(self.horizon), &self.schema)?;
        self.score_matrix(&raw)
    }

    pub fn score_matrix(&self, raw: &FeatureMatrix) -> Result<(FeatureMatrix, Vec<f64>, Vec<f64>)> {
        let raw = match &self.selected {
            Some(cols) => raw.select_columns(cols)?,
            None => raw.clone(),
        };
        let m = impute(&self.imputer, &raw)?;
        let scores = self.model.predict(&m)?;
        let comparator = self.logistic.predict(&standardize(&self.standardizer, &m)?)?;
        Ok((m, scores, comparator))
    }
}

/// Fits the imputer, standardizer, boosted model and logistic baseline on
/// one raw training matrix.
pub fn fit_matrix(
    raw_train: &FeatureMatrix,
    schema: MatrixSchema,
    selected: Option<Vec<String>>,
    horizon: Minutes,
    cfg: &PipelineConfig,
) -> Result<HorizonFit> {
    let raw_train = match &selected {
        Some(cols) => raw_train.select_columns(cols)?,
        None => raw_train.clone(),
    };
    let imputer = fit_imputer(&raw_train, &cfg.imputer)?;
    let train_m = impute(&imputer, &raw_train)?;
    let weights = sample_weights(&train_m.labels, &class_weights(&train_m.labels)?);
    let model = train_gbdt(&train_m, &train_m.labels, &weights, &cfg.model)?;
    let standardizer = fit_standardizer(&train_m)?;
    let logistic = train_logistic(&standardize(&standardizer, &train_m)?, &train_m.labels, &weights, &cfg.logistic)?;
    Ok(HorizonFit {
        horizon,
        schema,
        selected,
        imputer,
        standardizer,
        model,
        logistic,
        train: train_m,
        test: None,
        test_scores: Vec::new(),
        comparator_scores: Vec::new(),
    })
}

/// Keeps `columns` in schema order, naming any the schema lacks.
pub fn schema_ordered(schema: &MatrixSchema, columns: &[String]) -> Result<Vec<String>> {
    let all: Vec<String> = schema.column_descriptors().into_iter().map(|c| c.name).collect();
    if let Some(bad) = columns.iter().find(|c| !all.contains(c)) {
        return Err(Error::precondition(format!("selected column `{bad}` is not produced by the schema")));
    }
    Ok(all.into_iter().filter(|c| columns.contains(c)).collect())
}

/// Fits all states for one horizon on `train`, scoring `test` if non-empty.
/// With `columns`, only those matrix columns are used.
pub fn fit_horizon(
    train: &[PatientStay],
    test: &[PatientStay],
    variables: &[String],
    manifest: &VariableManifest,
    horizon: Minutes,
    columns: Option<&[String]>,
    cfg: &PipelineConfig,
) -> Result<HorizonFit> {
    let window = cfg.window(horizon);
    let schema = MatrixSchema::derive(train, &window, variables, Some(manifest))?;
    let raw_train = build_matrix_with_schema(train, &window, &schema)?;
    let selected = columns.map(|c| schema_ordered(&schema, c)).transpose()?;
    let mut fit = fit_matrix(&raw_train, schema, selected, horizon, cfg)?;
    if !test.is_empty() {
        let (m, s, c) = fit.score(test, cfg)?;
        fit.test = Some(m);
        fit.test_scores = s;
        fit.comparator_scores = c;
    }
    Ok(fit)
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub universe: Universe,
    /// Farthest horizon first.
    pub fits: Vec<HorizonFit>,
}

impl PipelineRun {
    pub fn fit(&self, horizon: Minutes) -> Option<&HorizonFit> {
        self.fits.iter().find(|f| f.horizon == horizon)
    }

    /// Thresholded test-set predictions at every horizon.
    pub fn horizon_predictions(&self, threshold: f64) -> Result<HorizonPredictions> {
        let mut rows: BTreeMap<Minutes, Vec<(String, bool, bool)>> = BTreeMap::new();
        for f in &self.fits {
            let m = f.test.as_ref().ok_or_else(|| Error::precondition("run has no test partition"))?;
            rows.insert(
                f.horizon,
                m.row_ids
                    .iter()
                    .zip(&f.test_scores)
                    .zip(&m.labels)
                    .map(|((id, &s), &y)| (id.clone(), s >= threshold, y))
                    .collect(),
            );
        }
        HorizonPredictions::from_rows(&rows)
    }
}

/// Runs every horizon on the shared universe. Horizons are independent and
/// fitted in parallel; the output order is farthest first.
pub fn run_pipeline(cohort: &[PatientStay], manifest: &VariableManifest, cfg: &PipelineConfig) -> Result<PipelineRun> {
    let universe = select_universe(cohort, manifest, cfg)?;
    let train = universe.train_stays();
    let test = universe.test_stays();
    let fits = cfg
        .horizons_far_to_near()
        .par_iter()
        .map(|&h| fit_horizon(&train, &test, &universe.variables, manifest, h, None, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(PipelineRun { universe, fits })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub threshold: f64,
    pub bootstrap: BootstrapConfig,
    pub permutations: usize,
    pub permutation_seed: u64,
    pub min_group_size: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            threshold: metrics::DEFAULT_THRESHOLD,
            bootstrap: BootstrapConfig::default(),
            permutations: 1000,
            permutation_seed: 42,
            min_group_size: metrics::DEFAULT_MIN_GROUP_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonEvaluation {
    pub horizon: Minutes,
    pub dataset: String,
    pub model: MetricReport,
    pub comparator: MetricReport,
    pub auroc_band: UncertaintyBand,
    pub average_precision_band: UncertaintyBand,
    pub permutation_p: f64,
    pub subgroups: Vec<GroupReport>,
}

/// Subgroup tags for each row: sex, ethnicity, ventilation and age band.
pub fn group_tags(m: &FeatureMatrix) -> Vec<Vec<String>> {
    let age = m.column_index("age");
    let vent = m.column_index("ventilated");
    (0..m.n_rows())
        .map(|i| {
            let t = &m.group_tags[i];
            let mut tags = vec![format!("sex={}", t.sex)];
            if !t.ethnicity.is_empty() {
                tags.push(format!("ethnicity={}", t.ethnicity));
            }
            if let Some(j) = vent {
                tags.push(format!("ventilated={}", if m.get(i, j) > 0.5 { "yes" } else { "no" }));
            }
            if let Some(j) = age {
                let a = m.get(i, j);
                let band = if a < 45.0 {
                    "<45"
                } else if a < 65.0 {
                    "45-64"
                } else if a < 80.0 {
                    "65-79"
                } else {
                    ">=80"
                };
                tags.push(format!("age={band}"));
            }
            tags
        })
        .collect()
}

pub fn evaluate_scores(
    m: &FeatureMatrix,
    scores: &[f64],
    comparator: &[f64],
    horizon: Minutes,
    dataset: &str,
    cfg: &EvaluationConfig,
) -> Result<HorizonEvaluation> {
    let labels = &m.labels;
    Ok(HorizonEvaluation {
        horizon,
        dataset: dataset.to_string(),
        model: metrics::thresholded_report(scores, labels, cfg.threshold)?,
        comparator: metrics::thresholded_report(comparator, labels, cfg.threshold)?,
        auroc_band: bootstrap_ci(metrics::auroc, scores, labels, &cfg.bootstrap)?,
        average_precision_band: bootstrap_ci(metrics::average_precision, scores, labels, &cfg.bootstrap)?,
        permutation_p: metrics::permutation_significance(scores, labels, cfg.permutations, cfg.permutation_seed)?,
        subgroups: metrics::subpopulation_report(scores, labels, &group_tags(m), cfg.threshold, cfg.min_group_size)?,
    })
}

pub fn evaluate_fit(fit: &HorizonFit, cfg: &EvaluationConfig) -> Result<HorizonEvaluation> {
    let m = fit.test.as_ref().ok_or_else(|| Error::precondition("fit has no evaluation rows"))?;
    evaluate_scores(m, &fit.test_scores, &fit.comparator_scores, fit.horizon, "internal", cfg)
}

/// Test-set report per horizon on the shared universe, farthest first.
pub fn horizon_stability_table(
    cohort: &[PatientStay],
    manifest: &VariableManifest,
    cfg: &PipelineConfig,
) -> Result<Vec<(Minutes, MetricReport)>> {
    let run = run_pipeline(cohort, manifest, cfg)?;
    run.fits
        .iter()
        .map(|f| {
            let m = f.test.as_ref().expect("pipeline fits carry a test partition");
            Ok((f.horizon, metrics::thresholded_report(&f.test_scores, &m.labels, cfg.threshold)?))
        })
        .collect()
}

/// Shapley rankings on the test rows of each horizon, farthest first.
pub fn horizon_sweep_rankings(
    cohort: &[PatientStay],
    manifest: &VariableManifest,
    cfg: &PipelineConfig,
) -> Result<Vec<HorizonRanking>> {
    let run = run_pipeline(cohort, manifest, cfg)?;
    run.fits
        .iter()
        .map(|f| rank_features(&f.model, f.test.as_ref().expect("pipeline fits carry a test partition"), f.horizon))
        .collect()
}

/// Which internal rows the external-validation model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExternalScope {
    /// Every eligible internal stay.
    FullInternal,
    /// Only the internal training partition, as in internal evaluation.
    TrainPartition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalResult {
    pub horizon: Minutes,
    pub internal: Option<HorizonEvaluation>,
    pub external: HorizonEvaluation,
    pub external_tally: ExclusionTally,
}

/// Trains on the internal cohort and evaluates on an external one that is
/// encoded, imputed and scored with the internal states only.
pub fn external_validation(
    internal: &[PatientStay],
    external: &[PatientStay],
    manifest: &VariableManifest,
    cfg: &PipelineConfig,
    scope: ExternalScope,
    columns: Option<&BTreeMap<Minutes, Vec<String>>>,
    eval: &EvaluationConfig,
) -> Result<Vec<ExternalResult>> {
    let universe = select_universe(internal, manifest, cfg)?;
    let train = match scope {
        ExternalScope::FullInternal => universe.stays.clone(),
        ExternalScope::TrainPartition => universe.train_stays(),
    };
    let test = match scope {
        ExternalScope::FullInternal => Vec::new(),
        ExternalScope::TrainPartition => universe.test_stays(),
    };
    let far = cfg.horizons_far_to_near()[0];
    let (mut ext, external_tally) = cfg.inclusion.apply(external, far)?;
    ext.sort_by(|a, b| a.stay_id.cmp(&b.stay_id));
    if ext.is_empty() {
        return Err(Error::precondition("no external stay passes the inclusion rules"));
    }
    if let Some(cols) = columns {
        let far_schema = MatrixSchema::derive(&train, &cfg.window(far), &universe.variables, Some(manifest))?;
        let descriptors = far_schema.column_descriptors();
        let needed: std::collections::BTreeSet<&str> = cols
            .values()
            .flatten()
            .filter_map(|c| descriptors.iter().find(|d| &d.name == c && d.statistic.is_some()))
            .map(|d| d.source.as_str())
            .collect();
        for v in needed {
            if !ext.iter().any(|s| s.series.get(v).is_some_and(|o| !o.is_empty())) {
                return Err(Error::Data(format!("external cohort never charts selected variable `{v}`")));
            }
        }
    }
    cfg.horizons_far_to_near()
        .par_iter()
        .map(|&h| {
            let cols = match columns {
                Some(map) => Some(
                    map.get(&h)
                        .ok_or_else(|| Error::precondition(format!("no selected columns for horizon {h}")))?
                        .as_slice(),
                ),
                None => None,
            };
            let fit = fit_horizon(&train, &test, &universe.variables, manifest, h, cols, cfg)?;
            let internal = match fit.test {
                Some(_) => Some(evaluate_fit(&fit, eval)?),
                None => None,
            };
            let (m, s, c) = fit.score(&ext, cfg)?;
            Ok(ExternalResult {
                horizon: h,
                internal,
                external: evaluate_scores(&m, &s, &c, h, "external", eval)?,
                external_tally: external_tally.clone(),
            })
        })
        .collect()
}
