//! One function per subcommand. Every stage reads its inputs from files
//! written by earlier stages, writes under `<out>/<stage>/`, and records
//! input and output hashes in the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use icurisk::clinical::{clinical_impact_curve, decision_curve};
use icurisk::cohort::io::{read_cohort, read_manifest, write_cohort, write_manifest, VARIABLES_FILE};
use icurisk::cohort::{generate_cohort, ExclusionTally, Minutes, PatientStay, VariableManifest};
use icurisk::explain::{explain_rows, perturbation_test, rank_from_attributions, PerturbationReport};
use icurisk::model::{
    class_weights, grid_search, sample_weights, train_gbdt, train_logistic, BoostedEnsemble, GbdtParams,
    GridSearchResult, LogisticModel, TuneConfig,
};
use icurisk::pipeline::{
    evaluate_fit, evaluate_scores, external_validation, fit_horizon, select_universe, ExternalScope,
    HorizonEvaluation, Universe,
};
use icurisk::preprocess::{
    fit_imputer, fit_standardizer, impute, load_state, save_state, standardize, StandardizerState,
};
use icurisk::temporal::{consistency_cohorts, ConsistencyReport, HorizonPredictions};
use icurisk::window::{build_matrix_with_schema, read_matrix, write_matrix, FeatureMatrix, MatrixSchema};
use icurisk::{Error, Result};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{ParamSource, RunConfig};
use crate::manifest::{hash_tree, relative, sha256_file, RunManifest, StageRecord};
use crate::svg::{bar_chart, line_chart, Series};

pub const STAGES: [&str; 9] = ["generate", "prepare", "tune", "train", "evaluate", "explain", "curves", "external", "report"];

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

/// Train/test assignment fixed at `prepare`; its hash guards later stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub variables: Vec<String>,
    pub tallies: Vec<(Minutes, ExclusionTally)>,
}

impl Partition {
    fn of(u: &Universe) -> Self {
        let ids = |idx: &[usize]| idx.iter().map(|&i| u.stays[i].stay_id.clone()).collect();
        Partition {
            train: ids(&u.train),
            test: ids(&u.test),
            variables: u.variables.clone(),
            tallies: u.tallies.clone(),
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        line: e.line() as u64,
        reason: e.to_string(),
    })
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Precondition(format!("{} is missing; run `{stage}` first", path.display())))
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

impl Context {
    pub fn new(cfg: RunConfig, out: PathBuf) -> Self {
        Context { cfg, out }
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    pub fn horizon_dir(&self, stage: &str, h: Minutes) -> PathBuf {
        self.out.join(stage).join(format!("h{h}"))
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.cfg.paths.cohort.clone().unwrap_or_else(|| self.out.join("generate").join("cohort"))
    }

    pub fn manifest_file(&self) -> PathBuf {
        self.cfg.paths.manifest.clone().unwrap_or_else(|| self.cohort_dir().join(VARIABLES_FILE))
    }

    pub fn external_dir(&self) -> Option<PathBuf> {
        self.cfg
            .paths
            .external
            .clone()
            .or_else(|| self.cfg.external.synthetic.then(|| self.out.join("generate").join("external")))
    }

    pub fn partition_file(&self) -> PathBuf {
        self.stage_dir("prepare").join("partition.json")
    }

    fn horizons(&self) -> Vec<Minutes> {
        self.cfg.pipeline.horizons_far_to_near()
    }

    fn load_cohort(&self) -> Result<(Vec<PatientStay>, VariableManifest, Vec<PathBuf>)> {
        let dir = self.cohort_dir();
        require(&dir, "generate")?;
        let mf = self.manifest_file();
        let cohort = read_cohort(&dir)?;
        let manifest = read_manifest(&mf)?;
        Ok((cohort, manifest, vec![dir, mf]))
    }

    /// Runs `body` as stage `name`, hashing what it read and wrote.
    fn run_stage<F>(&self, name: &str, body: F) -> Result<()>
    where
        F: FnOnce() -> Result<Vec<PathBuf>>,
    {
        let start = Instant::now();
        mkdir(&self.out)?;
        let mut manifest = RunManifest::open(&self.out, self.cfg.echo())?;
        if !matches!(name, "generate" | "prepare") {
            manifest.check_partition(&self.partition_file())?;
        }
        let dir = self.stage_dir(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        mkdir(&dir)?;
        let inputs = body()?;
        let mut record = StageRecord::default();
        for p in inputs {
            if p.is_dir() {
                record.inputs.extend(hash_tree(&self.out, &p)?);
            } else {
                record.inputs.insert(relative(&self.out, &p), sha256_file(&p)?);
            }
        }
        record.outputs = hash_tree(&self.out, &dir)?;
        if name == "prepare" {
            manifest.partition_hash = Some(sha256_file(&self.partition_file())?);
        }
        manifest.record(name, record, start.elapsed().as_secs_f64());
        manifest.save(&self.out)
    }

    pub fn run(&self, stage: &str) -> Result<()> {
        match stage {
            "generate" => self.generate(),
            "prepare" => self.prepare(),
            "tune" => self.tune(),
            "train" => self.train(),
            "evaluate" => self.evaluate(),
            "explain" => self.explain(),
            "curves" => self.curves(),
            "external" => self.external(),
            "report" => self.report(),
            other => Err(Error::InvalidConfig { field: "stage".into(), reason: format!("unknown stage `{other}`") }),
        }
    }

    pub fn generate(&self) -> Result<()> {
        self.run_stage("generate", || {
            let dir = self.stage_dir("generate");
            let spec = &self.cfg.generate;
            let cohort = generate_cohort(spec)?;
            write_cohort(&cohort, &dir.join("cohort"))?;
            write_manifest(&spec.manifest(), &dir.join("cohort").join(VARIABLES_FILE))?;
            if self.cfg.external.synthetic && self.cfg.paths.external.is_none() {
                let ext = &self.cfg.external.spec;
                write_cohort(&generate_cohort(ext)?, &dir.join("external"))?;
                write_manifest(&ext.manifest(), &dir.join("external").join(VARIABLES_FILE))?;
            }
            Ok(Vec::new())
        })
    }

    pub fn prepare(&self) -> Result<()> {
        self.run_stage("prepare", || {
            let (cohort, manifest, inputs) = self.load_cohort()?;
            let cfg = &self.cfg.pipeline;
            let universe = select_universe(&cohort, &manifest, cfg)?;
            write_json(&self.partition_file(), &Partition::of(&universe))?;
            let train = universe.train_stays();
            let test = universe.test_stays();
            self.horizons().par_iter().try_for_each(|&h| -> Result<()> {
                let dir = self.horizon_dir("prepare", h);
                mkdir(&dir)?;
                let window = cfg.window(h);
                let schema = MatrixSchema::derive(&train, &window, &universe.variables, Some(&manifest))?;
                let raw_train = build_matrix_with_schema(&train, &window, &schema)?;
                let raw_test = build_matrix_with_schema(&test, &window, &schema)?;
                let imputer = fit_imputer(&raw_train, &cfg.imputer)?;
                let train_m = impute(&imputer, &raw_train)?;
                let test_m = impute(&imputer, &raw_test)?;
                let standardizer = fit_standardizer(&train_m)?;
                write_json(&dir.join("schema.json"), &schema)?;
                write_matrix(&raw_train, &dir.join("train_raw.csv"))?;
                write_matrix(&raw_test, &dir.join("test_raw.csv"))?;
                write_matrix(&train_m, &dir.join("train.csv"))?;
                write_matrix(&test_m, &dir.join("test.csv"))?;
                save_state(&imputer, &dir.join("imputer.toml"))?;
                save_state(&standardizer, &dir.join("standardizer.toml"))
            })?;
            Ok(inputs)
        })
    }

    pub fn tune(&self) -> Result<()> {
        self.run_stage("tune", || {
            let tc = TuneConfig {
                k: self.cfg.tune.k,
                seed: self.cfg.tune.seed,
                imputer: self.cfg.pipeline.imputer.clone(),
                base: self.cfg.pipeline.model.clone(),
            };
            let inputs = self
                .horizons()
                .par_iter()
                .map(|&h| -> Result<PathBuf> {
                    let src = self.horizon_dir("prepare", h).join("train_raw.csv");
                    require(&src, "prepare")?;
                    let result = grid_search(&read_matrix(&src)?, &self.cfg.tune.grid, &tc)?;
                    let dir = self.horizon_dir("tune", h);
                    mkdir(&dir)?;
                    write_grid(&dir.join("grid.csv"), &result)?;
                    write_json(&dir.join("best.json"), &result.best)?;
                    Ok(src)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(inputs)
        })
    }

    fn params_for(&self, h: Minutes) -> Result<(GbdtParams, Option<PathBuf>)> {
        match self.cfg.train.params {
            ParamSource::Config => Ok((self.cfg.pipeline.model.clone(), None)),
            ParamSource::Tuned => {
                let p = self.horizon_dir("tune", h).join("best.json");
                require(&p, "tune")?;
                Ok((read_json(&p)?, Some(p)))
            }
        }
    }

    pub fn train(&self) -> Result<()> {
        self.run_stage("train", || {
            let inputs = self
                .horizons()
                .par_iter()
                .map(|&h| -> Result<Vec<PathBuf>> {
                    let prep = self.horizon_dir("prepare", h);
                    let (train_p, std_p) = (prep.join("train.csv"), prep.join("standardizer.toml"));
                    require(&train_p, "prepare")?;
                    let (params, tuned) = self.params_for(h)?;
                    let m = read_matrix(&train_p)?;
                    let standardizer: StandardizerState = load_state(&std_p)?;
                    let weights = sample_weights(&m.labels, &class_weights(&m.labels)?);
                    let model = train_gbdt(&m, &m.labels, &weights, &params)?;
                    let logistic =
                        train_logistic(&standardize(&standardizer, &m)?, &m.labels, &weights, &self.cfg.pipeline.logistic)?;
                    let dir = self.horizon_dir("train", h);
                    mkdir(&dir)?;
                    model.save(&dir.join("model.json"))?;
                    write_json(&dir.join("logistic.json"), &logistic)?;
                    Ok([train_p, std_p].into_iter().chain(tuned).collect())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(inputs.concat())
        })
    }

    /// Test rows with boosted and comparator scores for one horizon.
    fn scored_test(&self, h: Minutes) -> Result<(FeatureMatrix, Vec<f64>, Vec<f64>, BoostedEnsemble, Vec<PathBuf>)> {
        let prep = self.horizon_dir("prepare", h);
        let tr = self.horizon_dir("train", h);
        let files = vec![prep.join("test.csv"), prep.join("standardizer.toml"), tr.join("model.json"), tr.join("logistic.json")];
        require(&files[0], "prepare")?;
        require(&files[2], "train")?;
        let m = read_matrix(&files[0])?;
        let standardizer: StandardizerState = load_state(&files[1])?;
        let model = BoostedEnsemble::load(&files[2])?;
        let logistic: LogisticModel = read_json(&files[3])?;
        let scores = model.predict(&m)?;
        let comparator = logistic.predict(&standardize(&standardizer, &m)?)?;
        Ok((m, scores, comparator, model, files))
    }

    pub fn evaluate(&self) -> Result<()> {
        self.run_stage("evaluate", || {
            let ec = &self.cfg.evaluate;
            let results = self
                .horizons()
                .par_iter()
                .map(|&h| -> Result<(HorizonEvaluation, Vec<(String, bool, bool)>, Vec<PathBuf>)> {
                    let (m, scores, comparator, _, files) = self.scored_test(h)?;
                    let report = evaluate_scores(&m, &scores, &comparator, h, "internal", ec)?;
                    let dir = self.horizon_dir("evaluate", h);
                    mkdir(&dir)?;
                    write_json(&dir.join("report.json"), &report)?;
                    write_csv(
                        &dir.join("subgroups.csv"),
                        &["group", "n", "n_pos", "small", "defined", "auroc", "average_precision", "sensitivity", "specificity", "balanced_accuracy"],
                        report.subgroups.iter().map(|g| {
                            let r = &g.report;
                            vec![
                                g.group.clone(),
                                r.n.to_string(),
                                r.n_pos.to_string(),
                                g.small.to_string(),
                                g.defined.to_string(),
                                opt(r.auroc),
                                opt(r.average_precision),
                                opt(r.sensitivity),
                                opt(r.specificity),
                                opt(r.balanced_accuracy),
                            ]
                        }),
                    )?;
                    let rows: Vec<(String, bool, bool)> = (0..m.n_rows())
                        .map(|i| (m.row_ids[i].clone(), scores[i] >= ec.threshold, m.labels[i]))
                        .collect();
                    write_csv(
                        &dir.join("predictions.csv"),
                        &["row_id", "label", "score", "comparator", "predicted"],
                        (0..m.n_rows()).map(|i| {
                            vec![
                                m.row_ids[i].clone(),
                                u8::from(m.labels[i]).to_string(),
                                scores[i].to_string(),
                                comparator[i].to_string(),
                                u8::from(rows[i].1).to_string(),
                            ]
                        }),
                    )?;
                    Ok((report, rows, files))
                })
                .collect::<Result<Vec<_>>>()?;
            let dir = self.stage_dir("evaluate");
            write_csv(
                &dir.join("stability.csv"),
                &[
                    "horizon_minutes", "n", "n_pos", "auroc", "auroc_lower", "auroc_upper", "average_precision",
                    "sensitivity", "specificity", "balanced_accuracy", "permutation_p", "comparator_auroc",
                ],
                results.iter().map(|(r, _, _)| {
                    vec![
                        r.horizon.to_string(),
                        r.model.n.to_string(),
                        r.model.n_pos.to_string(),
                        opt(r.model.auroc),
                        r.auroc_band.lower.to_string(),
                        r.auroc_band.upper.to_string(),
                        opt(r.model.average_precision),
                        opt(r.model.sensitivity),
                        opt(r.model.specificity),
                        opt(r.model.balanced_accuracy),
                        r.permutation_p.to_string(),
                        opt(r.comparator.auroc),
                    ]
                }),
            )?;
            let by_h: BTreeMap<Minutes, Vec<(String, bool, bool)>> =
                results.iter().map(|(r, rows, _)| (r.horizon, rows.clone())).collect();
            let temporal = consistency_cohorts(&HorizonPredictions::from_rows(&by_h)?)?;
            write_json(&dir.join("temporal.json"), &temporal)?;
            write_csv(
                &dir.join("temporal.csv"),
                &["cohort", "wrong_at_minutes", "denominator", "flips", "rate"],
                temporal
                    .cohorts
                    .iter()
                    .map(|c| {
                        vec![c.name.clone(), c.wrong_at.to_string(), c.denominator.to_string(), c.stays.len().to_string(), c.rate.to_string()]
                    })
                    .chain(std::iter::once(vec![
                        "pooled".into(),
                        String::new(),
                        temporal.pooled_denominator.to_string(),
                        temporal.cohorts.iter().map(|c| c.stays.len()).sum::<usize>().to_string(),
                        temporal.pooled_rate.to_string(),
                    ])),
            )?;
            Ok(results.into_iter().flat_map(|(_, _, f)| f).collect())
        })
    }

    pub fn explain(&self) -> Result<()> {
        self.run_stage("explain", || {
            let ex = &self.cfg.explain;
            let inputs = self
                .horizons()
                .par_iter()
                .map(|&h| -> Result<Vec<PathBuf>> {
                    let (m, _, _, model, mut files) = self.scored_test(h)?;
                    let train_p = self.horizon_dir("prepare", h).join("train.csv");
                    let train = read_matrix(&train_p)?;
                    files.push(train_p);
                    let attributions = explain_rows(&model, &m)?;
                    let margins = model.predict_margin(&m)?;
                    let max_error = attributions
                        .iter()
                        .zip(&margins)
                        .map(|(a, &mg)| (a.total() - mg).abs())
                        .fold(0.0f64, f64::max);
                    let columns = m.column_names();
                    let phis: Vec<Vec<f64>> = attributions.iter().map(|a| a.phi.clone()).collect();
                    let ranking = rank_from_attributions(&columns, &phis, h)?;
                    let perturbation = perturbation_test(&train, &m, &model.params, h, &ex.perturbation)?;

                    let dir = self.horizon_dir("explain", h);
                    mkdir(&dir)?;
                    write_csv(
                        &dir.join("ranking.csv"),
                        &["rank", "column", "mean_abs_phi"],
                        ranking
                            .features
                            .iter()
                            .enumerate()
                            .map(|(i, f)| vec![(i + 1).to_string(), f.column.clone(), f.mean_abs_phi.to_string()]),
                    )?;
                    let bars: Vec<(String, f64)> =
                        ranking.features.iter().take(ex.top_k).map(|f| (f.column.clone(), f.mean_abs_phi)).collect();
                    write_text(
                        &dir.join("ranking.svg"),
                        &bar_chart(&format!("Mean |SHAP| at {} h before the event", h / 60), "mean |phi| (log-odds)", &bars),
                    )?;
                    if ex.attributions {
                        let mut header = vec!["row_id", "base_value"];
                        header.extend(columns.iter().map(String::as_str));
                        write_csv(
                            &dir.join("attributions.csv"),
                            &header,
                            attributions.iter().zip(&m.row_ids).map(|(a, id)| {
                                let mut r = vec![id.clone(), a.base_value.to_string()];
                                r.extend(a.phi.iter().map(|x| x.to_string()));
                                r
                            }),
                        )?;
                    }
                    write_json(&dir.join("perturbation.json"), &perturbation)?;
                    write_json(
                        &dir.join("summary.json"),
                        &ExplainSummary {
                            horizon: h,
                            rows: m.n_rows(),
                            local_accuracy_max_error: max_error,
                            top: ranking.top(ex.top_k).into_iter().map(String::from).collect(),
                        },
                    )?;
                    Ok(files)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(inputs.concat())
        })
    }

    pub fn curves(&self) -> Result<()> {
        self.run_stage("curves", || {
            let cc = &self.cfg.curves;
            let inputs = self
                .horizons()
                .par_iter()
                .map(|&h| -> Result<Vec<PathBuf>> {
                    let (m, scores, comparator, _, files) = self.scored_test(h)?;
                    let bands = cc.bands.then_some(&cc.bootstrap);
                    let dc = decision_curve(&scores, &m.labels, &cc.thresholds, Some(&comparator), bands)?;
                    let impact = clinical_impact_curve(&scores, &m.labels, &cc.thresholds, cc.population)?;
                    let dir = self.horizon_dir("curves", h);
                    mkdir(&dir)?;
                    let band = |b: &Option<Vec<icurisk::clinical::Band>>, i: usize, lower: bool| {
                        b.as_ref().map_or(String::new(), |v| if lower { v[i].lower } else { v[i].upper }.to_string())
                    };
                    let comp = dc.comparator.clone().unwrap_or_default();
                    write_csv(
                        &dir.join("decision.csv"),
                        &[
                            "threshold", "model", "treat_all", "treat_none", "comparator", "model_lower", "model_upper",
                            "comparator_lower", "comparator_upper",
                        ],
                        (0..dc.thresholds.len()).map(|i| {
                            vec![
                                dc.thresholds[i].to_string(),
                                dc.model[i].to_string(),
                                dc.all[i].to_string(),
                                dc.none[i].to_string(),
                                comp.get(i).map_or(String::new(), |x| x.to_string()),
                                band(&dc.model_band, i, true),
                                band(&dc.model_band, i, false),
                                band(&dc.comparator_band, i, true),
                                band(&dc.comparator_band, i, false),
                            ]
                        }),
                    )?;
                    write_text(&dir.join("decision.svg"), &decision_svg(h, &dc))?;
                    let rounded = impact.rounded();
                    write_csv(
                        &dir.join("impact.csv"),
                        &["threshold", "declared", "true_positives", "declared_rounded", "true_positives_rounded"],
                        (0..impact.thresholds.len()).map(|i| {
                            vec![
                                impact.thresholds[i].to_string(),
                                impact.declared[i].to_string(),
                                impact.true_positives[i].to_string(),
                                rounded[i].0.to_string(),
                                rounded[i].1.to_string(),
                            ]
                        }),
                    )?;
                    let pts = |v: &[f64]| impact.thresholds.iter().copied().zip(v.iter().copied()).collect::<Vec<_>>();
                    let series = [
                        Series { name: "high risk".into(), points: pts(&impact.declared), band: None, dashed: false },
                        Series { name: "high risk, died".into(), points: pts(&impact.true_positives), band: None, dashed: true },
                    ];
                    write_text(
                        &dir.join("impact.svg"),
                        &line_chart(
                            &format!("Clinical impact per {} patients, {} h", impact.population, h / 60),
                            "threshold probability",
                            "number of patients",
                            &series,
                            Some((0.0, impact.population)),
                        ),
                    )?;
                    Ok(files)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(inputs.concat())
        })
    }

    fn top_columns(&self, h: Minutes, k: usize) -> Result<(Vec<String>, PathBuf)> {
        let p = self.horizon_dir("explain", h).join("ranking.csv");
        require(&p, "explain")?;
        let mut r = csv::Reader::from_path(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        let mut cols = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            cols.push(rec.get(1).unwrap_or_default().to_string());
        }
        cols.truncate(k);
        Ok((cols, p))
    }

    pub fn external(&self) -> Result<()> {
        self.run_stage("external", || {
            let ext_dir = self
                .external_dir()
                .ok_or_else(|| Error::Precondition("no external cohort configured (paths.external)".into()))?;
            require(&ext_dir, "generate")?;
            let (cohort, manifest, mut inputs) = self.load_cohort()?;
            let external = read_cohort(&ext_dir)?;
            inputs.push(ext_dir);
            let cfg = &self.cfg.pipeline;
            let universe = select_universe(&cohort, &manifest, cfg)?;
            let recorded: Partition = read_json(&self.partition_file())?;
            if Partition::of(&universe) != recorded {
                return Err(Error::Precondition("cohort no longer yields the partition recorded at prepare".into()));
            }
            let mut columns = BTreeMap::new();
            for h in self.horizons() {
                let (cols, p) = self.top_columns(h, self.cfg.external.top_k)?;
                columns.insert(h, cols);
                inputs.push(p);
            }
            let scope = self.cfg.external.scope;
            let results = external_validation(&cohort, &external, &manifest, cfg, scope, Some(&columns), &self.cfg.evaluate)?;
            let train = universe.train_stays();
            let test = universe.test_stays();
            let mut rows = Vec::new();
            for r in results {
                let internal = match &r.internal {
                    Some(i) => i.clone(),
                    None => {
                        let fit = fit_horizon(&train, &test, &universe.variables, &manifest, r.horizon, Some(&columns[&r.horizon]), cfg)?;
                        evaluate_fit(&fit, &self.cfg.evaluate)?
                    }
                };
                let dir = self.horizon_dir("external", r.horizon);
                mkdir(&dir)?;
                write_json(
                    &dir.join("report.json"),
                    &ExternalReport {
                        horizon: r.horizon,
                        scope,
                        columns: columns[&r.horizon].clone(),
                        internal_top_k: internal.clone(),
                        external: r.external.clone(),
                        external_tally: r.external_tally.clone(),
                    },
                )?;
                for e in [&internal, &r.external] {
                    rows.push(vec![
                        r.horizon.to_string(),
                        e.dataset.clone(),
                        e.model.n.to_string(),
                        e.model.n_pos.to_string(),
                        opt(e.model.auroc),
                        e.auroc_band.lower.to_string(),
                        e.auroc_band.upper.to_string(),
                        opt(e.model.average_precision),
                        opt(e.model.sensitivity),
                        opt(e.model.specificity),
                        opt(e.model.balanced_accuracy),
                    ]);
                }
            }
            write_csv(
                &self.stage_dir("external").join("comparison.csv"),
                &[
                    "horizon_minutes", "dataset", "n", "n_pos", "auroc", "auroc_lower", "auroc_upper", "average_precision",
                    "sensitivity", "specificity", "balanced_accuracy",
                ],
                rows,
            )?;
            Ok(inputs)
        })
    }

    pub fn report(&self) -> Result<()> {
        self.run_stage("report", || {
            let mut inputs = vec![self.partition_file()];
            let mut horizons = Vec::new();
            for h in self.horizons() {
                let eval_p = self.horizon_dir("evaluate", h).join("report.json");
                require(&eval_p, "evaluate")?;
                let evaluation: HorizonEvaluation = read_json(&eval_p)?;
                inputs.push(eval_p);
                let mut load = |stage: &str, file: &str| -> Option<PathBuf> {
                    let p = self.horizon_dir(stage, h).join(file);
                    p.exists().then(|| {
                        inputs.push(p.clone());
                        p
                    })
                };
                let explain = load("explain", "summary.json").map(|p| read_json::<ExplainSummary>(&p)).transpose()?;
                let perturbation =
                    load("explain", "perturbation.json").map(|p| read_json::<PerturbationReport>(&p)).transpose()?;
                let external = load("external", "report.json").map(|p| read_json::<ExternalReport>(&p)).transpose()?;
                horizons.push(HorizonSummary { horizon: h, evaluation, explain, perturbation, external });
            }
            let temporal_p = self.stage_dir("evaluate").join("temporal.json");
            let temporal: ConsistencyReport = read_json(&temporal_p)?;
            inputs.push(temporal_p);
            let summary = RunSummary {
                partition: read_json::<Partition>(&self.partition_file()).map(|p| (p.train.len(), p.test.len()))?,
                horizons,
                temporal,
            };
            let dir = self.stage_dir("report");
            write_json(&dir.join("summary.json"), &summary)?;
            write_text(&dir.join("report.md"), &render_report(&summary))?;
            Ok(inputs)
        })
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<()> {
        for s in STAGES {
            if s == "external" && self.external_dir().is_none() {
                continue;
            }
            self.run(s)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainSummary {
    pub horizon: Minutes,
    pub rows: usize,
    /// Largest |base value + sum of attributions - margin| over the rows.
    pub local_accuracy_max_error: f64,
    pub top: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalReport {
    pub horizon: Minutes,
    pub scope: ExternalScope,
    pub columns: Vec<String>,
    /// Trained on the internal training partition with the same columns.
    pub internal_top_k: HorizonEvaluation,
    pub external: HorizonEvaluation,
    pub external_tally: ExclusionTally,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonSummary {
    pub horizon: Minutes,
    pub evaluation: HorizonEvaluation,
    pub explain: Option<ExplainSummary>,
    pub perturbation: Option<PerturbationReport>,
    pub external: Option<ExternalReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    /// Train and test sizes.
    pub partition: (usize, usize),
    pub horizons: Vec<HorizonSummary>,
    pub temporal: ConsistencyReport,
}

fn write_grid(path: &Path, result: &GridSearchResult) -> Result<()> {
    let k = result.table.first().map_or(0, |r| r.fold_auroc.len());
    let folds: Vec<String> = (0..k).map(|f| format!("fold{f}_auroc")).collect();
    let mut header = vec!["max_depth", "rounds", "eta", "lambda", "gamma", "min_child_weight", "mean_auroc", "std_auroc", "best"];
    header.extend(folds.iter().map(String::as_str));
    write_csv(
        path,
        &header,
        result.table.iter().enumerate().map(|(i, r)| {
            let p = &r.params;
            let mut row = vec![
                p.max_depth.to_string(),
                p.rounds.to_string(),
                p.eta.to_string(),
                p.lambda.to_string(),
                p.gamma.to_string(),
                p.min_child_weight.to_string(),
                r.mean.to_string(),
                r.std.to_string(),
                u8::from(i == result.best_index).to_string(),
            ];
            row.extend(r.fold_auroc.iter().map(|x| x.to_string()));
            row
        }),
    )
}

fn decision_svg(h: Minutes, dc: &icurisk::clinical::CurveSet) -> String {
    let pts = |v: &[f64]| dc.thresholds.iter().copied().zip(v.iter().copied()).collect::<Vec<_>>();
    let band = |b: &Option<Vec<icurisk::clinical::Band>>| {
        b.as_ref().map(|v| dc.thresholds.iter().zip(v).map(|(&t, b)| (t, b.lower, b.upper)).collect())
    };
    let mut series = vec![Series { name: "boosted trees".into(), points: pts(&dc.model), band: band(&dc.model_band), dashed: false }];
    if let Some(c) = &dc.comparator {
        series.push(Series { name: "logistic".into(), points: pts(c), band: band(&dc.comparator_band), dashed: false });
    }
    series.push(Series { name: "treat all".into(), points: pts(&dc.all), band: None, dashed: true });
    series.push(Series { name: "treat none".into(), points: pts(&dc.none), band: None, dashed: true });
    let top = dc.prevalence.max(0.01) * 1.1;
    line_chart(
        &format!("Decision curve, {} h before the event", h / 60),
        "threshold probability",
        "net benefit",
        &series,
        Some((-0.05, top)),
    )
}

fn fmt3(x: Option<f64>) -> String {
    x.map_or("n/a".into(), |v| format!("{v:.3}"))
}

fn render_report(s: &RunSummary) -> String {
    use std::fmt::Write as _;
    let mut md = String::new();
    let _ = writeln!(md, "# Run report\n");
    let _ = writeln!(md, "Training stays: {}. Test stays: {}.\n", s.partition.0, s.partition.1);
    let _ = writeln!(md, "## Discrimination by horizon\n");
    let _ = writeln!(md, "| horizon (h) | AUROC | band | AP | sensitivity | specificity | balanced acc. | logistic AUROC | p |");
    let _ = writeln!(md, "|---|---|---|---|---|---|---|---|---|");
    for h in &s.horizons {
        let e = &h.evaluation;
        let _ = writeln!(
            md,
            "| {} | {} | {:.3} to {:.3} | {} | {} | {} | {} | {} | {:.4} |",
            h.horizon / 60,
            fmt3(e.model.auroc),
            e.auroc_band.lower,
            e.auroc_band.upper,
            fmt3(e.model.average_precision),
            fmt3(e.model.sensitivity),
            fmt3(e.model.specificity),
            fmt3(e.model.balanced_accuracy),
            fmt3(e.comparator.auroc),
            e.permutation_p
        );
    }
    if s.horizons.iter().any(|h| h.explain.is_some()) {
        let _ = writeln!(md, "\n## Feature attributions\n");
        let _ = writeln!(md, "| horizon (h) | top features | noise rank (min) | top-k Jaccard | local accuracy error |");
        let _ = writeln!(md, "|---|---|---|---|---|");
        for h in &s.horizons {
            let (Some(x), p) = (&h.explain, &h.perturbation) else { continue };
            let top: Vec<&str> = x.top.iter().take(5).map(String::as_str).collect();
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {:.2e} |",
                h.horizon / 60,
                top.join(", "),
                p.as_ref().map_or("n/a".into(), |p| p.min_noise_rank.to_string()),
                p.as_ref().map_or("n/a".into(), |p| format!("{:.2}", p.mean_jaccard)),
                x.local_accuracy_max_error
            );
        }
    }
    if s.horizons.iter().any(|h| h.external.is_some()) {
        let _ = writeln!(md, "\n## External validation\n");
        let _ = writeln!(md, "| horizon (h) | columns | internal AUROC | external AUROC | external n |");
        let _ = writeln!(md, "|---|---|---|---|---|");
        for h in &s.horizons {
            let Some(x) = &h.external else { continue };
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                h.horizon / 60,
                x.columns.len(),
                fmt3(x.internal_top_k.model.auroc),
                fmt3(x.external.model.auroc),
                x.external.model.n
            );
        }
    }
    let _ = writeln!(md, "\n## Temporal consistency\n");
    let _ = writeln!(md, "| cohort | wrong at (h) | flips | eligible | rate |");
    let _ = writeln!(md, "|---|---|---|---|---|");
    for c in &s.temporal.cohorts {
        let _ = writeln!(md, "| {} | {} | {} | {} | {:.1}% |", c.name, c.wrong_at / 60, c.stays.len(), c.denominator, c.rate * 100.0);
    }
    let _ = writeln!(md, "| pooled | | | {} | {:.1}% |", s.temporal.pooled_denominator, s.temporal.pooled_rate * 100.0);
    md
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_from_universe_lists_ids() {
        let spec = icurisk::cohort::CohortSpec { n_stays: 200, ..Default::default() };
        let cohort = generate_cohort(&spec).unwrap();
        let cfg = icurisk::pipeline::PipelineConfig::default();
        let u = select_universe(&cohort, &spec.manifest(), &cfg).unwrap();
        let p = Partition::of(&u);
        assert_eq!(p.train.len() + p.test.len(), u.stays.len());
        assert!(p.test.iter().all(|id| !p.train.contains(id)));
    }
}
