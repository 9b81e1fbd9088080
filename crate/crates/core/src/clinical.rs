//! Net benefit, decision curves and clinical impact curves.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{percentile_band, resample, BootstrapConfig};
use crate::rng;

pub const DEFAULT_POPULATION: f64 = 1000.0;

/// 0.01, 0.02, ..., 0.99.
pub fn default_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::precondition("threshold grid is empty"));
    }
    if grid.iter().any(|&r| !(r > 0.0 && r < 1.0)) {
        return Err(Error::precondition("thresholds must lie strictly between 0 and 1"));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::precondition("thresholds must be strictly increasing"));
    }
    Ok(())
}

/// Net benefit from confusion counts at risk threshold `r`.
pub fn net_benefit_from_counts(tp: usize, fp: usize, n_pos: usize, n_neg: usize, r: f64) -> Result<f64> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::precondition(format!("risk threshold {r} must lie strictly between 0 and 1")));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::precondition("net benefit needs both classes"));
    }
    let n = (n_pos + n_neg) as f64;
    let p = n_pos as f64 / n;
    let tpr = tp as f64 / n_pos as f64;
    let fpr = fp as f64 / n_neg as f64;
    Ok(tpr * p - r / (1.0 - r) * fpr * (1.0 - p))
}

/// Net benefit of treating rows with `score >= r`.
pub fn net_benefit(scores: &[f64], labels: &[bool], r: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::precondition("scores and labels differ in length"));
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut n_pos = 0;
    for (&s, &y) in scores.iter().zip(labels) {
        n_pos += usize::from(y);
        if s >= r {
            if y {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    net_benefit_from_counts(tp, fp, n_pos, labels.len() - n_pos, r)
}

/// Net benefit of treating everyone.
pub fn treat_all(prevalence: f64, r: f64) -> f64 {
    prevalence - r / (1.0 - r) * (1.0 - prevalence)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub thresholds: Vec<f64>,
    pub prevalence: f64,
    pub model: Vec<f64>,
    pub all: Vec<f64>,
    pub none: Vec<f64>,
    pub comparator: Option<Vec<f64>>,
    pub model_band: Option<Vec<Band>>,
    pub comparator_band: Option<Vec<Band>>,
}

fn series(scores: &[f64], labels: &[bool], grid: &[f64]) -> Result<Vec<f64>> {
    grid.iter().map(|&r| net_benefit(scores, labels, r)).collect()
}

/// Decision curve for `scores` with treat-all and treat-none references,
/// an optional comparator, and optional paired bootstrap bands.
pub fn decision_curve(
    scores: &[f64],
    labels: &[bool],
    grid: &[f64],
    comparator: Option<&[f64]>,
    bootstrap: Option<&BootstrapConfig>,
) -> Result<CurveSet> {
    check_grid(grid)?;
    if let Some(c) = comparator {
        if c.len() != scores.len() {
            return Err(Error::precondition("comparator scores differ in length"));
        }
    }
    let model = series(scores, labels, grid)?;
    let prevalence = labels.iter().filter(|&&y| y).count() as f64 / labels.len() as f64;
    let comp = comparator.map(|c| series(c, labels, grid)).transpose()?;
    let (model_band, comparator_band) = match bootstrap {
        None => (None, None),
        Some(cfg) => {
            let (m, c) = bands(scores, labels, grid, comparator, cfg, &model, comp.as_deref())?;
            (Some(m), c)
        }
    };
    Ok(CurveSet {
        thresholds: grid.to_vec(),
        prevalence,
        all: grid.iter().map(|&r| treat_all(prevalence, r)).collect(),
        none: vec![0.0; grid.len()],
        model,
        comparator: comp,
        model_band,
        comparator_band,
    })
}

type Bands = (Vec<Band>, Option<Vec<Band>>);

fn bands(
    scores: &[f64],
    labels: &[bool],
    grid: &[f64],
    comparator: Option<&[f64]>,
    cfg: &BootstrapConfig,
    model_point: &[f64],
    comp_point: Option<&[f64]>,
) -> Result<Bands> {
    if cfg.iterations < 2 {
        return Err(Error::precondition("bootstrap needs at least two iterations"));
    }
    let n = scores.len();
    let draws: Vec<Option<(Vec<f64>, Option<Vec<f64>>)>> = (0..cfg.iterations)
        .into_par_iter()
        .map(|it| {
            let mut r = rng::stream(cfg.seed, "curve-bootstrap", it as u64);
            for _ in 0..20 {
                let idx = resample(n, &mut r);
                let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
                if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
                    continue;
                }
                let pick = |s: &[f64]| idx.iter().map(|&i| s[i]).collect::<Vec<f64>>();
                let m = series(&pick(scores), &y, grid).ok()?;
                let c = comparator.map(|c| series(&pick(c), &y, grid).ok()).unwrap_or(None);
                return Some((m, c));
            }
            None
        })
        .collect();
    let draws: Vec<(Vec<f64>, Option<Vec<f64>>)> = draws
        .into_iter()
        .collect::<Option<_>>()
        .ok_or_else(|| Error::precondition("decision-curve bootstrap kept drawing single-class resamples"))?;
    let band_of = |point: &[f64], pick: &dyn Fn(&(Vec<f64>, Option<Vec<f64>>)) -> f64, t: usize| {
        let values: Vec<f64> = draws.iter().map(pick).collect();
        let (lower, upper) = percentile_band(point[t], values, cfg.level);
        Band { lower, upper }
    };
    let model = (0..grid.len()).map(|t| band_of(model_point, &|d| d.0[t], t)).collect();
    let comp = comp_point.map(|cp| {
        (0..grid.len())
            .map(|t| band_of(cp, &|d| d.1.as_ref().map_or(f64::NAN, |c| c[t]), t))
            .collect()
    });
    Ok((model, comp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactCurve {
    pub thresholds: Vec<f64>,
    pub population: f64,
    /// Rows with `score >= R`, scaled to the standardized population.
    pub declared: Vec<f64>,
    pub true_positives: Vec<f64>,
}

impl ImpactCurve {
    /// Counts rounded half-up, for display.
    pub fn rounded(&self) -> Vec<(u64, u64)> {
        let r = |x: f64| (x + 0.5).floor() as u64;
        self.declared.iter().zip(&self.true_positives).map(|(&d, &t)| (r(d), r(t))).collect()
    }
}

pub fn clinical_impact_curve(scores: &[f64], labels: &[bool], grid: &[f64], population: f64) -> Result<ImpactCurve> {
    check_grid(grid)?;
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::precondition("impact curve needs equally long, non-empty scores and labels"));
    }
    if !(population > 0.0 && population.is_finite()) {
        return Err(Error::precondition("population must be positive"));
    }
    let n = scores.len() as f64;
    let mut declared = Vec::with_capacity(grid.len());
    let mut true_positives = Vec::with_capacity(grid.len());
    for &r in grid {
        let mut d = 0usize;
        let mut t = 0usize;
        for (&s, &y) in scores.iter().zip(labels) {
            if s >= r {
                d += 1;
                t += usize::from(y);
            }
        }
        declared.push(population * d as f64 / n);
        true_positives.push(population * t as f64 / n);
    }
    Ok(ImpactCurve {
        thresholds: grid.to_vec(),
        population,
        declared,
        true_positives,
    })
}
