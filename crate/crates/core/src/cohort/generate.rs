use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{CohortSpec, Minutes, Observation, PatientStay, Sex, VariableSpec};
use crate::error::Result;
use crate::rng;

const MIN_LOS_MINUTES: Minutes = 60;

/// Generates a synthetic cohort.
///
/// Each stay draws from its own seeded stream, so the output is a pure
/// function of `spec` no matter how many threads generate it. Outcomes are
/// Bernoulli at `spec.prevalence`. Each variable follows a stationary AR(1)
/// fluctuation around its mean, plus a per-stay offset, plus the planted
/// class shift scaled by the proximity ramp for non-survivors.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<PatientStay>> {
    spec.validate()?;
    let width = spec.n_stays.to_string().len().max(6);
    Ok((0..spec.n_stays)
        .into_par_iter()
        .map(|i| generate_stay(spec, i, width))
        .collect())
}

fn normal(rng: &mut rng::Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn generate_stay(spec: &CohortSpec, index: usize, width: usize) -> PatientStay {
    let mut rng = rng::stream(spec.rng_seed, "stay", index as u64);
    let p = spec.prevalence;
    let died = rng.random::<f64>() < p;
    // Centred so that the population mean is unaffected by the signal.
    let class_shift = if died { 1.0 - p } else { -p };

    let age = spec.age.mean + spec.age.sd * (normal(&mut rng) + spec.signal.age_effect * class_shift);
    let sex = if rng.random::<f64>() < spec.male_fraction {
        Sex::Male
    } else {
        Sex::Female
    };
    let ethnicity = pick_ethnicity(spec, rng.random::<f64>());
    let ventilated = rng.random::<f64>() < spec.ventilated_fraction;

    let cv2 = (spec.los_days.sd / spec.los_days.mean).powi(2);
    let sigma2 = (1.0 + cv2).ln();
    let mu = spec.los_days.mean.ln() - sigma2 / 2.0;
    let los_days = (mu + sigma2.sqrt() * normal(&mut rng)).exp();
    let los = ((los_days * 1440.0).round() as Minutes).max(MIN_LOS_MINUTES);
    let event_time = los;

    let mut series = BTreeMap::new();
    for v in &spec.variables {
        if let Some(obs) = generate_series(spec, v, los, event_time, died, class_shift, &mut rng) {
            series.insert(v.id.clone(), obs);
        }
    }

    PatientStay {
        stay_id: format!("{}{:0width$}", spec.id_prefix, index, width = width),
        age,
        sex,
        ethnicity,
        ventilated,
        admission_diagnoses: BTreeSet::from(["acute myocardial infarction".to_string()]),
        los,
        died,
        event_time,
        series,
        static_extras: BTreeMap::new(),
    }
}

fn pick_ethnicity(spec: &CohortSpec, u: f64) -> String {
    let total: f64 = spec.ethnicities.iter().map(|e| e.share).sum();
    let mut acc = 0.0;
    for e in &spec.ethnicities {
        acc += e.share / total;
        if u < acc {
            return e.name.clone();
        }
    }
    spec.ethnicities.last().map(|e| e.name.clone()).unwrap_or_default()
}

fn generate_series(
    spec: &CohortSpec,
    v: &VariableSpec,
    los: Minutes,
    event_time: Minutes,
    died: bool,
    class_shift: f64,
    rng: &mut rng::Rng,
) -> Option<Vec<Observation>> {
    // Draw everything unconditionally so the stream position does not depend
    // on whether this variable is charted.
    let charted = rng.random::<f64>() >= v.missing_rate;
    let stay_offset = normal(rng);
    let start = rng.random_range(0..(v.period_minutes / 2).max(1));
    if !charted {
        return None;
    }

    let kappa = spec.stay_level_share;
    let rho = (-f64::from(v.period_minutes) / v.autocorrelation_minutes).exp();
    let innovation = (1.0 - rho * rho).sqrt();
    let effect = spec.signal.effect(&v.id);

    let mut obs = Vec::new();
    let mut x = normal(rng);
    let mut t = start;
    while t <= los {
        let ramp = if died {
            spec.signal.ramp(event_time.saturating_sub(t))
        } else {
            1.0
        };
        let z = kappa.sqrt() * stay_offset + (1.0 - kappa).sqrt() * x;
        let value = v.mean + v.sd * (z + effect * class_shift * ramp);
        obs.push(Observation {
            time_offset: t,
            value,
        });
        x = rho * x + innovation * normal(rng);
        t += v.period_minutes;
    }
    (!obs.is_empty()).then_some(obs)
}
