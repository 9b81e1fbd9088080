//! Patient data model, synthetic cohort generation, and cohort selection.

mod generate;
mod inclusion;
pub mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::generate_cohort;
pub use inclusion::{
    apply_inclusion, filter_sparse_variables, ExclusionReason, ExclusionTally, InclusionRules,
    SparsityThresholds,
};

/// Minutes since ICU admission.
pub type Minutes = u32;

pub const MINUTES_PER_HOUR: Minutes = 60;

/// Multiplier on every planted effect in [`CohortSpec::external_shifted`].
pub const EXTERNAL_EFFECT_SCALE: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sex {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Ok(Sex::Male),
            "female" | "f" => Ok(Sex::Female),
            other => Err(format!("unknown sex `{other}`")),
        }
    }
}

/// Missingness class of a time-series variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableClass {
    Vital,
    Lab,
}

impl VariableClass {
    pub fn as_str(self) -> &'static str {
        match self {
            VariableClass::Vital => "vital",
            VariableClass::Lab => "lab",
        }
    }
}

impl FromStr for VariableClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "vital" => Ok(VariableClass::Vital),
            "lab" => Ok(VariableClass::Lab),
            other => Err(format!("unknown variable class `{other}`")),
        }
    }
}

/// One timestamped value of a series, without its variable key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time_offset: Minutes,
    pub value: f64,
}

/// A single charted measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementPoint {
    pub variable_id: String,
    pub time_offset: Minutes,
    pub value: f64,
}

/// One ICU stay.
///
/// `series` maps each variable to its observations sorted by time. The
/// generator and the reader both keep that ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientStay {
    pub stay_id: String,
    pub age: f64,
    pub sex: Sex,
    pub ethnicity: String,
    pub ventilated: bool,
    pub admission_diagnoses: BTreeSet<String>,
    pub los: Minutes,
    pub died: bool,
    /// Death time for non-survivors, discharge time otherwise.
    pub event_time: Minutes,
    pub series: BTreeMap<String, Vec<Observation>>,
    pub static_extras: BTreeMap<String, f64>,
}

impl PatientStay {
    pub fn points(&self) -> impl Iterator<Item = MeasurementPoint> + '_ {
        self.series.iter().flat_map(|(var, obs)| {
            obs.iter().map(move |o| MeasurementPoint {
                variable_id: var.clone(),
                time_offset: o.time_offset,
                value: o.value,
            })
        })
    }

    pub fn n_points(&self) -> usize {
        self.series.values().map(Vec::len).sum()
    }

    /// Checks the structural invariants of a stay.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.stay_id.is_empty() {
            return Err("empty stay_id".into());
        }
        if !self.age.is_finite() {
            return Err(format!("stay {}: non-finite age", self.stay_id));
        }
        if self.event_time > self.los {
            return Err(format!(
                "stay {}: event_time {} exceeds los {}",
                self.stay_id, self.event_time, self.los
            ));
        }
        for (var, obs) in &self.series {
            for o in obs {
                if !o.value.is_finite() {
                    return Err(format!("stay {}: non-finite value for {var}", self.stay_id));
                }
                if o.time_offset > self.los {
                    return Err(format!(
                        "stay {}: {var} at t={} beyond los {}",
                        self.stay_id, o.time_offset, self.los
                    ));
                }
            }
            if obs.windows(2).any(|w| w[0].time_offset > w[1].time_offset) {
                return Err(format!("stay {}: {var} not sorted by time", self.stay_id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableInfo {
    pub class: VariableClass,
    pub units: String,
}

/// Fixed mapping from variable id to missingness class and units.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VariableManifest {
    pub entries: BTreeMap<String, VariableInfo>,
}

impl VariableManifest {
    pub fn get(&self, id: &str) -> Option<&VariableInfo> {
        self.entries.get(id)
    }

    pub fn units(&self, id: &str) -> &str {
        self.entries.get(id).map(|v| v.units.as_str()).unwrap_or("")
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Mean and standard deviation of a Gaussian marginal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
}

impl Moments {
    pub const fn new(mean: f64, sd: f64) -> Self {
        Moments { mean, sd }
    }
}

/// Generative parameters of one time-series variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub id: String,
    pub class: VariableClass,
    pub units: String,
    pub mean: f64,
    pub sd: f64,
    /// Minutes between scheduled measurements.
    pub period_minutes: Minutes,
    /// Probability that a stay never has this variable charted.
    pub missing_rate: f64,
    /// Decorrelation time of the within-stay fluctuation.
    pub autocorrelation_minutes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EthnicityShare {
    pub name: String,
    pub share: f64,
}

/// Planted mortality signal.
///
/// Effects are class separations in standard-deviation units: at the
/// baseline ramp level the mean of a variable differs by `effect · sd`
/// between non-survivors and survivors. Shifts are centred on the
/// prevalence so the population mean stays at the variable's `mean`. Under
/// equal-variance Gaussian classes this is a logistic outcome model whose
/// log-odds slope on the variable is proportional to the effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalPlan {
    pub effects: BTreeMap<String, f64>,
    pub age_effect: f64,
    /// Lead time at which the ramp starts rising above 1.
    pub ramp_minutes: Minutes,
    /// Effect multiplier reached at the event.
    pub ramp_peak: f64,
}

impl SignalPlan {
    /// Effect multiplier at `time_to_event` minutes before the event.
    pub fn ramp(&self, time_to_event: Minutes) -> f64 {
        if self.ramp_minutes == 0 || time_to_event >= self.ramp_minutes {
            1.0
        } else {
            let approach = f64::from(self.ramp_minutes - time_to_event) / f64::from(self.ramp_minutes);
            1.0 + (self.ramp_peak - 1.0) * approach
        }
    }

    pub fn effect(&self, variable: &str) -> f64 {
        self.effects.get(variable).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub n_stays: usize,
    pub prevalence: f64,
    pub rng_seed: u64,
    pub age: Moments,
    pub male_fraction: f64,
    /// Length of stay in days; drawn log-normal with these moments.
    pub los_days: Moments,
    pub ventilated_fraction: f64,
    pub ethnicities: Vec<EthnicityShare>,
    /// Share of each variable's variance that is constant within a stay.
    pub stay_level_share: f64,
    pub variables: Vec<VariableSpec>,
    pub signal: SignalPlan,
    /// Prefix of generated stay ids, so two cohorts never collide.
    #[serde(default = "default_id_prefix")]
    pub id_prefix: String,
}

fn default_id_prefix() -> String {
    "S".into()
}

#[allow(clippy::too_many_arguments)]
fn var(
    id: &str,
    class: VariableClass,
    units: &str,
    mean: f64,
    sd: f64,
    missing_rate: f64,
) -> VariableSpec {
    let (period_minutes, autocorrelation_minutes) = match class {
        VariableClass::Vital => (60, 240.0),
        VariableClass::Lab => (360, 720.0),
    };
    VariableSpec {
        id: id.into(),
        class,
        units: units.into(),
        mean,
        sd,
        period_minutes,
        missing_rate,
        autocorrelation_minutes,
    }
}

impl Default for CohortSpec {
    /// Marginals of the internal (eICU training split) cohort summary.
    ///
    /// Heart rate, respiratory rate, SpO2, temperature and troponin are not
    /// in that summary; they carry conventional adult ICU values and no
    /// signal. Troponin is deliberately sparse so the lab threshold of the
    /// variable filter has something to drop.
    fn default() -> Self {
        use VariableClass::{Lab, Vital};
        let variables = vec![
            var("lactate", Lab, "mmol/L", 2.9, 2.8, 0.20),
            var("sbp", Vital, "mmHg", 120.2, 17.9, 0.02),
            var("glucose", Lab, "mg/dL", 150.4, 61.7, 0.05),
            var("wbc", Lab, "K/uL", 15.5, 10.5, 0.05),
            var("rdw", Lab, "%", 15.1, 2.2, 0.05),
            var("bun", Lab, "mg/dL", 27.4, 19.5, 0.05),
            var("bicarbonate", Lab, "mEq/L", 24.7, 4.2, 0.05),
            var("heart_rate", Vital, "bpm", 85.0, 15.0, 0.02),
            var("resp_rate", Vital, "breaths/min", 19.0, 5.0, 0.02),
            var("spo2", Vital, "%", 96.0, 3.0, 0.02),
            var("temperature", Vital, "C", 36.9, 0.6, 0.05),
            var("troponin", Lab, "ng/mL", 2.0, 4.0, 0.85),
        ];
        let effects = [
            ("lactate", 1.0),
            ("bun", 0.7),
            ("bicarbonate", -0.6),
            ("sbp", -0.5),
            ("wbc", 0.45),
            ("rdw", 0.2),
            ("glucose", 0.15),
            ("heart_rate", 0.15),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        CohortSpec {
            n_stays: 5000,
            prevalence: 0.12,
            rng_seed: 7,
            age: Moments::new(66.8, 12.7),
            male_fraction: 0.637,
            los_days: Moments::new(4.1, 2.7),
            ventilated_fraction: 0.30,
            ethnicities: vec![
                EthnicityShare { name: "caucasian".into(), share: 0.76 },
                EthnicityShare { name: "african_american".into(), share: 0.10 },
                EthnicityShare { name: "hispanic".into(), share: 0.05 },
                EthnicityShare { name: "asian".into(), share: 0.03 },
                EthnicityShare { name: "other".into(), share: 0.06 },
            ],
            stay_level_share: 0.5,
            variables,
            signal: SignalPlan {
                effects,
                age_effect: 0.2,
                ramp_minutes: 24 * MINUTES_PER_HOUR,
                ramp_peak: 2.0,
            },
            id_prefix: default_id_prefix(),
        }
    }
}

impl CohortSpec {
    /// Marginals of the external (MIMIC-IV training split) cohort summary,
    /// with the planted signal attenuated to `EXTERNAL_EFFECT_SCALE`. Used
    /// as a distribution-shifted validation cohort.
    ///
    /// Effects are in the cohort's own standard-deviation units, so moving
    /// the marginals alone leaves discrimination essentially unchanged; the
    /// attenuation stands in for the weaker separation seen at a new site.
    pub fn external_shifted() -> Self {
        let mut spec = CohortSpec {
            n_stays: 1143,
            prevalence: 0.115,
            rng_seed: 11,
            age: Moments::new(68.1, 13.2),
            male_fraction: 0.519,
            los_days: Moments::new(3.7, 2.9),
            id_prefix: "X".into(),
            ..CohortSpec::default()
        };
        for v in &mut spec.variables {
            let (mean, sd) = match v.id.as_str() {
                "lactate" => (2.0, 1.5),
                "sbp" => (126.3, 18.8),
                "glucose" => (136.5, 49.3),
                "wbc" => (10.6, 7.4),
                "rdw" => (14.4, 2.1),
                "bun" => (22.8, 17.0),
                "bicarbonate" => (23.3, 3.1),
                _ => (v.mean, v.sd),
            };
            v.mean = mean;
            v.sd = sd;
        }
        for e in spec.signal.effects.values_mut() {
            *e *= EXTERNAL_EFFECT_SCALE;
        }
        spec
    }

    /// Drops every planted effect, leaving pure marginals.
    pub fn without_signal(mut self) -> Self {
        self.signal.effects.clear();
        self.signal.age_effect = 0.0;
        self
    }

    pub fn manifest(&self) -> VariableManifest {
        VariableManifest {
            entries: self
                .variables
                .iter()
                .map(|v| {
                    (
                        v.id.clone(),
                        VariableInfo {
                            class: v.class,
                            units: v.units.clone(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn finite(field: &str, x: f64) -> Result<()> {
            if x.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("non-finite value {x}")))
            }
        }
        fn fraction(field: &str, x: f64) -> Result<()> {
            finite(field, x)?;
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::config(field, format!("{x} outside [0, 1]")))
            }
        }
        fn sd(field: &str, x: f64) -> Result<()> {
            finite(field, x)?;
            if x < 0.0 {
                Err(Error::config(field, format!("negative standard deviation {x}")))
            } else {
                Ok(())
            }
        }

        if self.n_stays == 0 {
            return Err(Error::config("n_stays", "must be positive"));
        }
        finite("prevalence", self.prevalence)?;
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::config(
                "prevalence",
                format!("{} outside (0, 1)", self.prevalence),
            ));
        }
        finite("age.mean", self.age.mean)?;
        sd("age.sd", self.age.sd)?;
        fraction("male_fraction", self.male_fraction)?;
        finite("los_days.mean", self.los_days.mean)?;
        if self.los_days.mean <= 0.0 {
            return Err(Error::config("los_days.mean", "must be positive"));
        }
        sd("los_days.sd", self.los_days.sd)?;
        fraction("ventilated_fraction", self.ventilated_fraction)?;
        fraction("stay_level_share", self.stay_level_share)?;
        if self.ethnicities.is_empty() {
            return Err(Error::config("ethnicities", "at least one category required"));
        }
        for e in &self.ethnicities {
            finite(&format!("ethnicities.{}", e.name), e.share)?;
            if e.share < 0.0 {
                return Err(Error::config(format!("ethnicities.{}", e.name), "negative share"));
            }
        }
        if self.ethnicities.iter().map(|e| e.share).sum::<f64>() <= 0.0 {
            return Err(Error::config("ethnicities", "shares sum to zero"));
        }
        let mut seen = BTreeSet::new();
        for v in &self.variables {
            let f = |name: &str| format!("variables.{}.{name}", v.id);
            if !seen.insert(v.id.as_str()) {
                return Err(Error::config(f("id"), "duplicate variable id"));
            }
            finite(&f("mean"), v.mean)?;
            sd(&f("sd"), v.sd)?;
            finite(&f("missing_rate"), v.missing_rate)?;
            if !(0.0..1.0).contains(&v.missing_rate) {
                return Err(Error::config(
                    f("missing_rate"),
                    format!("{} outside [0, 1)", v.missing_rate),
                ));
            }
            if v.period_minutes == 0 {
                return Err(Error::config(f("period_minutes"), "must be positive"));
            }
            finite(&f("autocorrelation_minutes"), v.autocorrelation_minutes)?;
            if v.autocorrelation_minutes <= 0.0 {
                return Err(Error::config(f("autocorrelation_minutes"), "must be positive"));
            }
        }
        for (k, e) in &self.signal.effects {
            finite(&format!("signal.effects.{k}"), *e)?;
            if !seen.contains(k.as_str()) {
                return Err(Error::config(
                    format!("signal.effects.{k}"),
                    "effect names an unknown variable",
                ));
            }
        }
        finite("signal.age_effect", self.signal.age_effect)?;
        finite("signal.ramp_peak", self.signal.ramp_peak)?;
        Ok(())
    }
}
