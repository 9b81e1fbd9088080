//! Cross-horizon consistency: stays that are classified correctly at every
//! farther horizon and then wrongly at one nearer horizon.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cohort::Minutes;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayPredictions {
    pub label: bool,
    pub predicted: BTreeMap<Minutes, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonPredictions {
    /// Farthest horizon first.
    pub horizons: Vec<Minutes>,
    pub stays: BTreeMap<String, StayPredictions>,
}

impl HorizonPredictions {
    /// Checks that every stay present at a horizon is also present at every
    /// nearer one.
    pub fn new(horizons: &[Minutes], stays: BTreeMap<String, StayPredictions>) -> Result<Self> {
        let mut hs = horizons.to_vec();
        hs.sort_unstable_by(|a, b| b.cmp(a));
        hs.dedup();
        for (id, s) in &stays {
            if let Some(h) = s.predicted.keys().find(|h| !hs.contains(h)) {
                return Err(Error::precondition(format!("stay {id}: prediction at unknown horizon {h}")));
            }
            let present: Vec<bool> = hs.iter().map(|h| s.predicted.contains_key(h)).collect();
            if present.windows(2).any(|w| w[0] && !w[1]) {
                return Err(Error::precondition(format!(
                    "stay {id} has a prediction at a farther horizon but not at a nearer one"
                )));
            }
        }
        Ok(HorizonPredictions { horizons: hs, stays })
    }

    /// Builds from per-horizon (stay id, predicted, label) rows.
    pub fn from_rows(rows: &BTreeMap<Minutes, Vec<(String, bool, bool)>>) -> Result<Self> {
        let mut stays: BTreeMap<String, StayPredictions> = BTreeMap::new();
        for (&h, list) in rows {
            for (id, pred, label) in list {
                let e = stays.entry(id.clone()).or_insert_with(|| StayPredictions {
                    label: *label,
                    predicted: BTreeMap::new(),
                });
                if e.label != *label {
                    return Err(Error::precondition(format!("stay {id} has conflicting labels")));
                }
                e.predicted.insert(h, *pred);
            }
        }
        let horizons: Vec<Minutes> = rows.keys().copied().collect();
        Self::new(&horizons, stays)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyCohort {
    /// `P1` is wrong at the nearest horizon, higher numbers farther out.
    pub name: String,
    /// Horizon of the first wrong prediction.
    pub wrong_at: Minutes,
    /// Horizons that must have been classified correctly.
    pub correct_at: Vec<Minutes>,
    pub stays: BTreeSet<String>,
    /// Stays evaluated at every horizon this cohort references.
    pub denominator: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub horizons: Vec<Minutes>,
    pub cohorts: Vec<ConsistencyCohort>,
    /// Union of all cohorts over stays evaluated at every horizon.
    pub pooled_rate: f64,
    pub pooled_denominator: usize,
}

pub fn consistency_cohorts(preds: &HorizonPredictions) -> Result<ConsistencyReport> {
    let hs = &preds.horizons;
    if hs.len() < 2 {
        return Err(Error::precondition("consistency analysis needs at least two horizons"));
    }
    let mut cohorts = Vec::new();
    for j in 1..hs.len() {
        let required = &hs[..=j];
        let mut denominator = 0;
        let mut members = BTreeSet::new();
        for (id, s) in &preds.stays {
            let Some(correct): Option<Vec<bool>> =
                required.iter().map(|h| s.predicted.get(h).map(|&p| p == s.label)).collect()
            else {
                continue;
            };
            denominator += 1;
            if correct[..j].iter().all(|&c| c) && !correct[j] {
                members.insert(id.clone());
            }
        }
        cohorts.push(ConsistencyCohort {
            name: format!("P{}", hs.len() - j),
            wrong_at: hs[j],
            correct_at: hs[..j].to_vec(),
            rate: if denominator == 0 { 0.0 } else { members.len() as f64 / denominator as f64 },
            stays: members,
            denominator,
        });
    }
    let complete: BTreeSet<&String> = preds
        .stays
        .iter()
        .filter(|(_, s)| hs.iter().all(|h| s.predicted.contains_key(h)))
        .map(|(id, _)| id)
        .collect();
    let pooled = cohorts
        .iter()
        .flat_map(|c| c.stays.iter())
        .filter(|id| complete.contains(id))
        .count();
    cohorts.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(ConsistencyReport {
        horizons: hs.clone(),
        pooled_denominator: complete.len(),
        pooled_rate: if complete.is_empty() { 0.0 } else { pooled as f64 / complete.len() as f64 },
        cohorts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const HS: [Minutes; 4] = [1440, 1080, 720, 360];

    fn stay(label: bool, preds: &[(Minutes, bool)]) -> StayPredictions {
        StayPredictions { label, predicted: preds.iter().copied().collect() }
    }

    fn all_correct(label: bool) -> StayPredictions {
        stay(label, &HS.map(|h| (h, label)))
    }

    #[test]
    fn one_flip_in_ten() {
        let mut stays: BTreeMap<String, StayPredictions> = (0..9).map(|i| (format!("s{i}"), all_correct(i % 2 == 0))).collect();
        stays.insert("s9".into(), stay(true, &[(1440, true), (1080, true), (720, true), (360, false)]));
        let r = consistency_cohorts(&HorizonPredictions::new(&HS, stays).unwrap()).unwrap();
        let p1 = r.cohorts.iter().find(|c| c.name == "P1").unwrap();
        assert_eq!((p1.wrong_at, p1.denominator, p1.rate), (360, 10, 0.1));
        assert!(r.cohorts.iter().filter(|c| c.name != "P1").all(|c| c.rate == 0.0));
        assert_eq!(r.pooled_rate, 0.1);
    }

    #[test]
    fn identical_predictions_give_zero_rates() {
        let stays = (0..20).map(|i| (format!("s{i}"), all_correct(i % 3 == 0))).collect();
        let r = consistency_cohorts(&HorizonPredictions::new(&HS, stays).unwrap()).unwrap();
        assert_eq!(r.cohorts.len(), 3);
        assert!(r.cohorts.iter().all(|c| c.rate == 0.0 && c.denominator == 20));
    }

    #[test]
    fn wrong_at_farthest_horizon_joins_no_cohort() {
        let stays = [("a".to_string(), stay(true, &[(1440, false), (1080, true), (720, false), (360, false)]))].into();
        let r = consistency_cohorts(&HorizonPredictions::new(&HS, stays).unwrap()).unwrap();
        assert!(r.cohorts.iter().all(|c| c.stays.is_empty()));
    }

    #[test]
    fn denominators_count_only_evaluated_stays() {
        let mut stays: BTreeMap<String, StayPredictions> = (0..4).map(|i| (format!("s{i}"), all_correct(true))).collect();
        // Present only at the two nearest horizons, wrong at 6 h.
        stays.insert("late".into(), stay(true, &[(720, true), (360, false)]));
        let r = consistency_cohorts(&HorizonPredictions::new(&HS, stays).unwrap()).unwrap();
        assert!(r.cohorts.iter().all(|c| c.denominator == 4 && c.stays.is_empty()));
        assert_eq!(r.pooled_denominator, 4);
    }

    #[test]
    fn rejects_bad_inputs() {
        let broken = [("x".to_string(), stay(true, &[(1440, true), (720, true)]))].into();
        assert!(HorizonPredictions::new(&HS, broken).is_err());
        let single = HorizonPredictions::new(&[360], [("x".to_string(), stay(true, &[(360, true)]))].into()).unwrap();
        assert!(consistency_cohorts(&single).is_err());
    }

    #[test]
    fn cohorts_are_disjoint() {
        let patterns: Vec<[bool; 4]> = (0..16u8).map(|b| [b & 1 != 0, b & 2 != 0, b & 4 != 0, b & 8 != 0]).collect();
        let stays = patterns
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("s{i:02}"), stay(true, &[(1440, p[0]), (1080, p[1]), (720, p[2]), (360, p[3])])))
            .collect();
        let r = consistency_cohorts(&HorizonPredictions::new(&HS, stays).unwrap()).unwrap();
        let total: usize = r.cohorts.iter().map(|c| c.stays.len()).sum();
        let union: BTreeSet<&String> = r.cohorts.iter().flat_map(|c| &c.stays).collect();
        assert_eq!(total, union.len());
        // Correct at 24 h then wrong at 18 h: half of the 16 patterns have
        // 24 h correct, and half of those are wrong at 18 h.
        assert_eq!(r.cohorts.iter().find(|c| c.name == "P3").unwrap().stays.len(), 4);
    }
}
