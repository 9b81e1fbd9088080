//! Run configuration: one TOML document with a section per stage, plus
//! `section.key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use icurisk::clinical::{default_grid, DEFAULT_POPULATION};
use icurisk::cohort::CohortSpec;
use icurisk::explain::PerturbationConfig;
use icurisk::metrics::BootstrapConfig;
use icurisk::model::HyperGrid;
use icurisk::pipeline::{EvaluationConfig, ExternalScope, PipelineConfig};
use icurisk::{Error, Result};
use serde::{Deserialize, Serialize};

pub const OUTPUT_ENV: &str = "ICURISK_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT: &str = "icurisk-out";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory with stays.csv and measurements.csv. Defaults to the
    /// generated cohort under the output directory.
    pub cohort: Option<PathBuf>,
    /// Variable manifest; defaults to `variables.csv` in the cohort directory.
    pub manifest: Option<PathBuf>,
    /// External cohort directory; defaults to the generated shifted cohort.
    pub external: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneSection {
    pub k: usize,
    pub seed: u64,
    pub grid: HyperGrid,
}

impl Default for TuneSection {
    fn default() -> Self {
        TuneSection {
            k: 5,
            seed: 42,
            grid: HyperGrid::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamSource {
    /// `[pipeline.model]` as configured.
    #[default]
    Config,
    /// The grid-search winner written by `tune`.
    Tuned,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub params: ParamSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub top_k: usize,
    pub attributions: bool,
    pub perturbation: PerturbationConfig,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection {
            top_k: 13,
            attributions: true,
            perturbation: PerturbationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurvesSection {
    pub thresholds: Vec<f64>,
    pub population: f64,
    pub bands: bool,
    pub bootstrap: BootstrapConfig,
}

impl Default for CurvesSection {
    fn default() -> Self {
        CurvesSection {
            thresholds: default_grid(),
            population: DEFAULT_POPULATION,
            bands: true,
            bootstrap: BootstrapConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalSection {
    /// Generate a shifted synthetic external cohort in `generate`.
    pub synthetic: bool,
    pub spec: CohortSpec,
    pub top_k: usize,
    pub scope: ExternalScope,
}

impl Default for ExternalSection {
    fn default() -> Self {
        ExternalSection {
            synthetic: true,
            spec: CohortSpec::external_shifted(),
            top_k: 8,
            scope: ExternalScope::FullInternal,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub generate: CohortSpec,
    pub pipeline: PipelineConfig,
    pub tune: TuneSection,
    pub train: TrainSection,
    pub evaluate: EvaluationConfig,
    pub explain: ExplainSection,
    pub curves: CurvesSection,
    pub external: ExternalSection,
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Overlays `top` onto `base`, merging sections key by key.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value` to a TOML table, creating sections as needed.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig { field: spec.into(), reason: "expected section.key=value".into() })?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig { field: key.into(), reason: "empty key segment".into() });
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::InvalidConfig {
            field: key.into(),
            reason: format!("`{p}` is not a section"),
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads an optional config file and applies overrides on top. Both are
    /// layered over the defaults, so a partial section keeps the default
    /// values of the keys it does not mention.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut user = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::InvalidConfig {
                    field: p.display().to_string(),
                    reason: e.to_string(),
                })?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let mut table = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        merge(&mut table, user);
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::InvalidConfig {
            field: "config".into(),
            reason: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.tune.grid.validate()?;
        if self.explain.top_k == 0 || self.external.top_k == 0 {
            return Err(Error::InvalidConfig { field: "top_k".into(), reason: "must be positive".into() });
        }
        for p in [&self.paths.cohort, &self.paths.manifest, &self.paths.external].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::InvalidConfig {
                    field: "paths".into(),
                    reason: format!("{} does not exist", p.display()),
                });
            }
        }
        Ok(())
    }

    /// Output directory: command line, then config, then environment, then
    /// the built-in default.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.paths.output.clone())
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
    }

    /// The configuration as recorded in the manifest; the output location
    /// is left out so that runs in different directories compare equal.
    pub fn echo(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.paths.output = None;
        serde_json::to_value(&c).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_and_parse_types() {
        let cfg = RunConfig::load(
            None,
            &[
                "pipeline.horizons=[360, 720]".into(),
                "generate.n_stays=300".into(),
                "pipeline.model.eta=0.05".into(),
                "external.scope=train_partition".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.pipeline.horizons, vec![360, 720]);
        assert_eq!(cfg.generate.n_stays, 300);
        assert_eq!(cfg.pipeline.model.eta, 0.05);
        assert_eq!(cfg.external.scope, ExternalScope::TrainPartition);
    }

    #[test]
    fn partial_section_keeps_its_own_defaults() {
        let cfg = RunConfig::load(None, &["external.spec.n_stays=400".into()]).unwrap();
        let shifted = CohortSpec::external_shifted();
        assert_eq!(cfg.external.spec, CohortSpec { n_stays: 400, ..shifted });
    }

    #[test]
    fn file_then_override() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[pipeline]\nhorizons = [1440]\n[pipeline.model]\nrounds = 7\n").unwrap();
        let cfg = RunConfig::load(Some(&p), &["pipeline.model.rounds=9".into()]).unwrap();
        assert_eq!(cfg.pipeline.horizons, vec![1440]);
        assert_eq!(cfg.pipeline.model.rounds, 9);
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(matches!(RunConfig::load(None, &["pipeline.horizons=[]".into()]), Err(Error::InvalidConfig { .. })));
        assert!(matches!(RunConfig::load(None, &["nonsense".into()]), Err(Error::InvalidConfig { .. })));
        assert!(matches!(RunConfig::load(None, &["pipeline.bogus=1".into()]), Err(Error::InvalidConfig { .. })));
    }
}
