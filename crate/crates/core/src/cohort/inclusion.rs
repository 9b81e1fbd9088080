use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Minutes, PatientStay, VariableClass, VariableManifest, MINUTES_PER_HOUR};
use crate::error::{Error, Result};

/// Cohort selection criteria. Ages are exclusive bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InclusionRules {
    pub min_age: f64,
    pub max_age: f64,
    pub min_los: Minutes,
}

impl Default for InclusionRules {
    fn default() -> Self {
        InclusionRules {
            min_age: 18.0,
            max_age: 89.0,
            min_los: 5 * MINUTES_PER_HOUR,
        }
    }
}

/// Exclusion reasons, in the order they are checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExclusionReason {
    AgeBounds,
    InsufficientStayLength,
    NoWindowMeasurements,
}

impl ExclusionReason {
    pub const ALL: [ExclusionReason; 3] = [
        ExclusionReason::AgeBounds,
        ExclusionReason::InsufficientStayLength,
        ExclusionReason::NoWindowMeasurements,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ExclusionReason::AgeBounds => "age bounds",
            ExclusionReason::InsufficientStayLength => "insufficient stay length",
            ExclusionReason::NoWindowMeasurements => "no measurements in window",
        }
    }
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExclusionTally {
    pub input: usize,
    pub retained: usize,
    /// One entry per reason in application order, zero counts included.
    pub excluded: Vec<(ExclusionReason, usize)>,
}

impl ExclusionTally {
    pub fn count(&self, reason: ExclusionReason) -> usize {
        self.excluded
            .iter()
            .find(|(r, _)| *r == reason)
            .map_or(0, |(_, n)| *n)
    }
}

impl InclusionRules {
    /// First criterion `stay` fails at `horizon`, if any.
    pub fn check(&self, stay: &PatientStay, horizon: Minutes) -> Option<ExclusionReason> {
        if !(stay.age > self.min_age && stay.age < self.max_age) {
            return Some(ExclusionReason::AgeBounds);
        }
        if stay.los < self.min_los.max(horizon) || stay.event_time < horizon {
            return Some(ExclusionReason::InsufficientStayLength);
        }
        let end = stay.event_time - horizon;
        let any = stay
            .series
            .values()
            .any(|obs| obs.first().is_some_and(|o| o.time_offset <= end));
        if !any {
            return Some(ExclusionReason::NoWindowMeasurements);
        }
        None
    }

    pub fn apply(
        &self,
        cohort: &[PatientStay],
        horizon: Minutes,
    ) -> Result<(Vec<PatientStay>, ExclusionTally)> {
        if horizon == 0 {
            return Err(Error::precondition("horizon must be positive"));
        }
        let mut counts: BTreeMap<ExclusionReason, usize> =
            ExclusionReason::ALL.iter().map(|r| (*r, 0)).collect();
        let mut kept = Vec::new();
        for stay in cohort {
            match self.check(stay, horizon) {
                Some(reason) => *counts.entry(reason).or_default() += 1,
                None => kept.push(stay.clone()),
            }
        }
        let tally = ExclusionTally {
            input: cohort.len(),
            retained: kept.len(),
            excluded: counts.into_iter().collect(),
        };
        Ok((kept, tally))
    }
}

/// Applies the default rules at `horizon` minutes.
pub fn apply_inclusion(
    cohort: &[PatientStay],
    horizon: Minutes,
) -> Result<(Vec<PatientStay>, ExclusionTally)> {
    InclusionRules::default().apply(cohort, horizon)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparsityThresholds {
    pub vital: f64,
    pub lab: f64,
}

impl Default for SparsityThresholds {
    fn default() -> Self {
        SparsityThresholds {
            vital: 0.125,
            lab: 0.25,
        }
    }
}

/// Variables charted in a large enough fraction of stays for their class.
///
/// Every variable in the manifest is considered; those never charted have
/// coverage 0 and are dropped. A variable charted in the cohort but absent
/// from the manifest has no class and is rejected.
pub fn filter_sparse_variables(
    cohort: &[PatientStay],
    manifest: &VariableManifest,
    thresholds: SparsityThresholds,
) -> Result<Vec<String>> {
    for (field, t) in [("vital", thresholds.vital), ("lab", thresholds.lab)] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::config(
                format!("sparsity.{field}"),
                format!("{t} outside [0, 1]"),
            ));
        }
    }
    let mut present: BTreeMap<&str, usize> = manifest.ids().map(|id| (id, 0)).collect();
    for stay in cohort {
        for (var, obs) in &stay.series {
            if obs.is_empty() {
                continue;
            }
            match present.get_mut(var.as_str()) {
                Some(n) => *n += 1,
                None => {
                    return Err(Error::Data(format!(
                        "variable `{var}` (stay {}) has no class in the variable manifest",
                        stay.stay_id
                    )))
                }
            }
        }
    }
    let n = cohort.len();
    Ok(present
        .into_iter()
        .filter(|&(id, count)| {
            if count == 0 || n == 0 {
                return false;
            }
            let threshold = match manifest.get(id).map(|v| v.class) {
                Some(VariableClass::Vital) => thresholds.vital,
                _ => thresholds.lab,
            };
            count as f64 / n as f64 >= threshold
        })
        .map(|(id, _)| id.to_string())
        .collect())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::cohort::{Observation, Sex, VariableInfo};

    pub(crate) fn stay(id: &str, age: f64, los_h: u32, points: &[(&str, u32, f64)]) -> PatientStay {
        let mut series: BTreeMap<String, Vec<Observation>> = BTreeMap::new();
        for &(v, t, x) in points {
            series.entry(v.into()).or_default().push(Observation {
                time_offset: t,
                value: x,
            });
        }
        PatientStay {
            stay_id: id.into(),
            age,
            sex: Sex::Male,
            ethnicity: "caucasian".into(),
            ventilated: false,
            admission_diagnoses: BTreeSet::new(),
            los: los_h * 60,
            died: false,
            event_time: los_h * 60,
            series,
            static_extras: BTreeMap::new(),
        }
    }

    #[test]
    fn short_stay_excluded_for_length() {
        let s = stay("a", 60.0, 4, &[("lactate", 0, 1.0)]);
        let (kept, tally) = apply_inclusion(&[s], 360).unwrap();
        assert!(kept.is_empty());
        assert_eq!(tally.count(ExclusionReason::InsufficientStayLength), 1);
        assert_eq!(ExclusionReason::InsufficientStayLength.label(), "insufficient stay length");
    }

    #[test]
    fn age_ninety_excluded() {
        let s = stay("a", 90.0, 40, &[("lactate", 0, 1.0)]);
        let (_, tally) = apply_inclusion(&[s], 360).unwrap();
        assert_eq!(tally.count(ExclusionReason::AgeBounds), 1);
        assert_eq!(ExclusionReason::AgeBounds.label(), "age bounds");
    }

    #[test]
    fn eligible_stay_retained() {
        let s = stay("a", 67.0, 30, &[("lactate", 60, 1.0)]);
        let (kept, tally) = apply_inclusion(&[s], 1440).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(tally.retained, 1);
    }

    #[test]
    fn window_without_points_excluded() {
        // Window ends at 30 h - 24 h = 6 h; the only point is later.
        let s = stay("a", 67.0, 30, &[("lactate", 7 * 60, 1.0)]);
        let (_, tally) = apply_inclusion(&[s], 1440).unwrap();
        assert_eq!(tally.count(ExclusionReason::NoWindowMeasurements), 1);
    }

    #[test]
    fn five_hour_floor_applies_below_it() {
        let s = stay("a", 67.0, 4, &[("lactate", 0, 1.0)]);
        let (kept, _) = apply_inclusion(&[s], 60).unwrap();
        assert!(kept.is_empty());
    }

    #[test]
    fn empty_input_gives_zeroed_tally() {
        let (kept, tally) = apply_inclusion(&[], 360).unwrap();
        assert!(kept.is_empty());
        assert_eq!(tally.input, 0);
        assert!(tally.excluded.iter().all(|(_, n)| *n == 0));
        assert_eq!(tally.excluded.len(), 3);
    }

    #[test]
    fn zero_horizon_rejected() {
        assert!(apply_inclusion(&[], 0).is_err());
    }

    fn manifest() -> VariableManifest {
        let mut m = VariableManifest::default();
        for (id, class) in [("hr", VariableClass::Vital), ("lab", VariableClass::Lab), ("never", VariableClass::Vital)] {
            m.entries.insert(id.into(), VariableInfo { class, units: String::new() });
        }
        m
    }

    fn coverage_cohort(n: usize, hr_frac: f64, lab_frac: f64) -> Vec<PatientStay> {
        (0..n)
            .map(|i| {
                let mut pts = vec![];
                if (i as f64) < hr_frac * n as f64 {
                    pts.push(("hr", 0, 80.0));
                }
                if (i as f64) < lab_frac * n as f64 {
                    pts.push(("lab", 0, 1.0));
                }
                stay(&format!("s{i:03}"), 60.0, 30, &pts)
            })
            .collect()
    }

    #[test]
    fn sparsity_thresholds_per_class() {
        let cohort = coverage_cohort(100, 0.13, 0.20);
        let kept = filter_sparse_variables(&cohort, &manifest(), SparsityThresholds::default()).unwrap();
        assert_eq!(kept, vec!["hr".to_string()]);

        let cohort = coverage_cohort(100, 0.10, 0.25);
        let kept = filter_sparse_variables(&cohort, &manifest(), SparsityThresholds::default()).unwrap();
        assert_eq!(kept, vec!["lab".to_string()]);
    }

    #[test]
    fn never_charted_dropped_even_at_zero_threshold() {
        let cohort = coverage_cohort(10, 1.0, 1.0);
        let kept = filter_sparse_variables(&cohort, &manifest(), SparsityThresholds { vital: 0.0, lab: 0.0 }).unwrap();
        assert!(!kept.contains(&"never".to_string()));
    }

    #[test]
    fn unknown_variable_class_rejected() {
        let cohort = vec![stay("a", 60.0, 30, &[("mystery", 0, 1.0)])];
        let err = filter_sparse_variables(&cohort, &manifest(), SparsityThresholds::default()).unwrap_err();
        assert!(err.to_string().contains("mystery"));
    }
}
