//! Study-level percentile bootstrap with per-iteration series selection and
//! fixed-distance image subsampling, plus a leave-one-study-out jackknife.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::sample_sorted;

use super::confusion::ConfusionMatrix;
use super::evaluation::EvalCohort;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
    pub step_mm: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 1000,
            level: 0.95,
            step_mm: 10.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BootstrapError {
    #[error("cohort has no studies")]
    EmptyCohort,
    #[error("invalid bootstrap configuration: {0}")]
    InvalidConfig(String),
    #[error("metric is undefined on the cohort")]
    UndefinedMetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CIResult {
    /// Metric on the full cohort, every image of every series.
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    /// Resamples on which the metric was defined.
    pub resamples: usize,
    pub seed: u64,
}

/// A metric over a confusion matrix; `None` where undefined.
pub type Metric<'a> = &'a (dyn Fn(&ConfusionMatrix) -> Option<f64> + Sync);

struct PreparedSeries {
    positions: Vec<f64>,
    /// (truth, prediction) canonical indices in position order.
    labels: Vec<Option<(usize, usize)>>,
}

fn prepare(cohort: &EvalCohort) -> Vec<Vec<PreparedSeries>> {
    cohort
        .studies
        .iter()
        .map(|study| {
            study
                .series
                .iter()
                .map(|series| {
                    let mut images: Vec<_> = series.images.iter().collect();
                    images.sort_by(|a, b| a.position.total_cmp(&b.position));
                    PreparedSeries {
                        positions: images.iter().map(|i| i.position).collect(),
                        labels: images
                            .iter()
                            .map(|i| i.predicted.map(|p| (i.truth.canonical_index(), p.canonical_index())))
                            .collect(),
                    }
                })
                .collect()
        })
        .collect()
}

fn validate(config: &BootstrapConfig) -> Result<(), BootstrapError> {
    if config.resamples == 0 {
        return Err(BootstrapError::InvalidConfig("resamples must be positive".into()));
    }
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(BootstrapError::InvalidConfig(format!("level {} outside (0, 1)", config.level)));
    }
    if !(config.step_mm > 0.0 && config.step_mm.is_finite()) {
        return Err(BootstrapError::InvalidConfig(format!("step {} mm must be positive", config.step_mm)));
    }
    Ok(())
}

/// Generator for resample `i`; independent of evaluation order.
fn resample_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

fn draw(prepared: &[Vec<PreparedSeries>], step: f64, rng: &mut ChaCha8Rng, cm: &mut ConfusionMatrix, kept: &mut Vec<usize>) {
    cm.clear();
    let n = prepared.len();
    for _ in 0..n {
        let study = &prepared[rng.random_range(0..n)];
        if study.is_empty() {
            continue;
        }
        let series = &study[rng.random_range(0..study.len())];
        let u: f64 = rng.random();
        kept.clear();
        sample_sorted(&series.positions, step, u, kept);
        for &k in kept.iter() {
            if let Some((t, p)) = series.labels[k] {
                cm.add_indexed(t, p, 1);
            }
        }
    }
}

/// Lower and upper order-statistic indices of a percentile interval over
/// `m` sorted values.
pub fn percentile_indices(m: usize, level: f64) -> (usize, usize) {
    let alpha = 1.0 - level;
    let lo = (alpha / 2.0 * m as f64 + 1e-9).floor() as usize;
    let hi = ((1.0 - alpha / 2.0) * m as f64 - 1e-9).ceil() as usize;
    (lo.min(m - 1), hi.saturating_sub(1).clamp(lo.min(m - 1), m - 1))
}

/// Percentile intervals for several metrics from one set of resamples.
///
/// Each resample draws studies with replacement, keeps one random series
/// per drawn study and subsamples it every `step_mm`. The interval is
/// widened, if needed, to contain the full-cohort point estimate.
pub fn bootstrap_many(
    cohort: &EvalCohort,
    metrics: &[Metric],
    config: &BootstrapConfig,
) -> Result<Vec<Result<CIResult, BootstrapError>>, BootstrapError> {
    validate(config)?;
    if cohort.studies.is_empty() {
        return Err(BootstrapError::EmptyCohort);
    }
    let prepared = prepare(cohort);
    let full = cohort.confusion();

    let per_resample: Vec<Vec<Option<f64>>> = (0..config.resamples)
        .into_par_iter()
        .map_init(
            || (ConfusionMatrix::all_regions(), Vec::new()),
            |(cm, kept), i| {
                let mut rng = resample_rng(config.seed, i);
                draw(&prepared, config.step_mm, &mut rng, cm, kept);
                metrics.iter().map(|m| m(cm)).collect()
            },
        )
        .collect();

    Ok(metrics
        .iter()
        .enumerate()
        .map(|(j, metric)| {
            let point = metric(&full).ok_or(BootstrapError::UndefinedMetric)?;
            let mut values: Vec<f64> = per_resample.iter().filter_map(|v| v[j]).collect();
            if values.is_empty() {
                return Err(BootstrapError::UndefinedMetric);
            }
            values.sort_by(f64::total_cmp);
            let (lo, hi) = percentile_indices(values.len(), config.level);
            Ok(CIResult {
                point,
                lo: values[lo].min(point),
                hi: values[hi].max(point),
                level: config.level,
                resamples: values.len(),
                seed: config.seed,
            })
        })
        .collect())
}

pub fn bootstrap_ci(cohort: &EvalCohort, metric: Metric, config: &BootstrapConfig) -> Result<CIResult, BootstrapError> {
    bootstrap_many(cohort, &[metric], config)?.remove(0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Jackknife {
    pub point: f64,
    pub standard_error: f64,
    pub bias: f64,
    /// Leave-one-study-out estimates; `None` where the metric is undefined.
    pub replicates: Vec<Option<f64>>,
}

/// Leave-one-study-out jackknife on the full (unsubsampled) cohort.
pub fn jackknife(cohort: &EvalCohort, metric: Metric) -> Result<Jackknife, BootstrapError> {
    if cohort.studies.is_empty() {
        return Err(BootstrapError::EmptyCohort);
    }
    let full = cohort.confusion();
    let point = metric(&full).ok_or(BootstrapError::UndefinedMetric)?;
    let replicates: Vec<Option<f64>> = cohort
        .studies
        .iter()
        .map(|study| {
            let single = EvalCohort {
                studies: vec![study.clone()],
            };
            let mut cm = full.clone();
            cm.subtract(&single.confusion());
            metric(&cm)
        })
        .collect();
    let defined: Vec<f64> = replicates.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(BootstrapError::UndefinedMetric);
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    let ss: f64 = defined.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok(Jackknife {
        point,
        standard_error: ((n - 1.0) / n * ss).sqrt(),
        bias: (n - 1.0) * (mean - point),
        replicates,
    })
}

pub fn weighted_sensitivity_metric(cm: &ConfusionMatrix) -> Option<f64> {
    cm.weighted_sensitivity().ok()
}

pub fn weighted_specificity_metric(cm: &ConfusionMatrix) -> Option<f64> {
    cm.weighted_specificity().ok()?.value
}
