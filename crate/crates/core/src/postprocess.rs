//! Series-level label rules: abdomen-chest merge, breast override,
//! uncertainty rejection, outlier-run removal and window smoothing.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::classify::{BodyRegion, ClassSet, Modality, Prediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyMetric {
    #[default]
    Margin,
    Entropy,
}

impl std::str::FromStr for UncertaintyMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "margin" => Ok(UncertaintyMetric::Margin),
            "entropy" => Ok(UncertaintyMetric::Entropy),
            other => Err(format!("unknown uncertainty metric {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub metric: UncertaintyMetric,
    /// Margin mode rejects below this mean; entropy mode rejects above it.
    pub threshold: f64,
    pub window: usize,
    pub min_run: usize,
    /// Fraction of Breast labels at or above which an MR series becomes Breast.
    pub breast_fraction: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            metric: UncertaintyMetric::Margin,
            threshold: 0.2,
            window: 3,
            min_run: 3,
            breast_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PostprocessError {
    #[error("series {0} has no predictions")]
    EmptySeries(String),
    #[error("prediction for {0} has no mass on the modality's classes")]
    NoModalityMass(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeriesStatus {
    Accepted,
    RejectedUncertain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Predicted,
    Merge,
    Breast,
    OutlierRemoval,
    Smoothing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesResult {
    pub series_uid: String,
    pub modality: Modality,
    pub per_image: Vec<Prediction>,
    /// Empty when the series is rejected.
    pub final_labels: Vec<BodyRegion>,
    pub status: SeriesStatus,
    pub series_regions: BTreeSet<BodyRegion>,
    /// Label sequence after each stage that ran, in order.
    pub trace: Vec<(Stage, Vec<BodyRegion>)>,
    pub mean_margin: f64,
    pub mean_entropy: f64,
}

fn count(labels: &[BodyRegion], region: BodyRegion) -> usize {
    labels.iter().filter(|l| **l == region).count()
}

/// Class that AbdomenChest folds into: the more frequent of Chest and
/// Abdomen among the labels, Abdomen on ties or when neither occurs.
pub fn merge_target(labels: &[BodyRegion]) -> BodyRegion {
    if count(labels, BodyRegion::Chest) > count(labels, BodyRegion::Abdomen) {
        BodyRegion::Chest
    } else {
        BodyRegion::Abdomen
    }
}

pub fn merge_abdomen_chest(labels: &[BodyRegion]) -> Vec<BodyRegion> {
    let target = merge_target(labels);
    labels
        .iter()
        .map(|l| if *l == BodyRegion::AbdomenChest { target } else { *l })
        .collect()
}

/// Whether the MR breast override fires: at least `fraction` of labels are Breast.
pub fn breast_rule_applies(labels: &[BodyRegion], modality: &Modality, fraction: f64) -> bool {
    *modality == Modality::Mr
        && !labels.is_empty()
        && count(labels, BodyRegion::Breast) as f64 >= fraction * labels.len() as f64
}

pub fn apply_breast_rule(labels: &[BodyRegion], modality: &Modality, fraction: f64) -> Vec<BodyRegion> {
    if breast_rule_applies(labels, modality, fraction) {
        vec![BodyRegion::Breast; labels.len()]
    } else {
        labels.to_vec()
    }
}

/// MR-only series rejection on the mean margin or mean normalized entropy.
pub fn reject_uncertain(
    predictions: &[Prediction],
    metric: UncertaintyMetric,
    threshold: f64,
    modality: &Modality,
) -> SeriesStatus {
    if *modality != Modality::Mr || predictions.is_empty() {
        return SeriesStatus::Accepted;
    }
    let n = predictions.len() as f64;
    let rejected = match metric {
        UncertaintyMetric::Margin => predictions.iter().map(|p| p.margin).sum::<f64>() / n < threshold,
        UncertaintyMetric::Entropy => predictions.iter().map(|p| p.entropy).sum::<f64>() / n > threshold,
    };
    if rejected {
        SeriesStatus::RejectedUncertain
    } else {
        SeriesStatus::Accepted
    }
}

fn runs(labels: &[BodyRegion]) -> Vec<(BodyRegion, usize, usize)> {
    let mut out: Vec<(BodyRegion, usize, usize)> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some((r, _, len)) if r == l => *len += 1,
            _ => out.push((*l, i, 1)),
        }
    }
    out
}

/// Relabels interior runs shorter than `min_run`, shortest first (leftmost on
/// ties), to the label of the longer neighbouring run (the preceding one on
/// ties), until none remain. The first and last runs are never changed.
pub fn remove_outlier_runs(labels: &[BodyRegion], min_run: usize) -> Vec<BodyRegion> {
    let mut out = labels.to_vec();
    loop {
        let r = runs(&out);
        if r.len() < 3 {
            return out;
        }
        let target = (1..r.len() - 1)
            .filter(|&i| r[i].2 < min_run)
            .min_by_key(|&i| (r[i].2, i));
        let Some(i) = target else {
            return out;
        };
        let (prev, next) = (r[i - 1], r[i + 1]);
        let label = if next.2 > prev.2 { next.0 } else { prev.0 };
        let (_, start, len) = r[i];
        out[start..start + len].iter_mut().for_each(|l| *l = label);
    }
}

/// Averages per-image probability vectors over a centered window (shrinking
/// at the ends) and keeps, at each position, the label in the window with
/// the highest mean. Ties go to the position's own label, then to the
/// earliest class.
///
/// `vectors[i]` is over `classes`; `labels[i]` is the current label.
pub fn smooth_labels(vectors: &[Vec<f64>], labels: &[BodyRegion], classes: &ClassSet, window: usize) -> Vec<BodyRegion> {
    let n = labels.len();
    let half = window.max(1) / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            let mut candidates: Vec<BodyRegion> = labels[lo..hi].to_vec();
            candidates.sort();
            candidates.dedup();
            let mean = |r: BodyRegion| -> f64 {
                let k = classes.index_of(r).expect("labels come from the class set");
                vectors[lo..hi].iter().map(|v| v[k]).sum::<f64>() / (hi - lo) as f64
            };
            let mut best = labels[i];
            let mut best_mean = mean(best);
            for c in candidates {
                let m = mean(c);
                if m > best_mean {
                    best = c;
                    best_mean = m;
                }
            }
            best
        })
        .collect()
}

/// Runs the stages in order: merge, breast, uncertainty, outlier removal,
/// smoothing. Predictions are first re-expressed over the modality's
/// internal class set; a rejected series produces no labels.
pub fn run_pipeline(
    series_uid: &str,
    predictions: &[Prediction],
    modality: &Modality,
    config: &PostprocessConfig,
) -> Result<SeriesResult, PostprocessError> {
    if predictions.is_empty() {
        return Err(PostprocessError::EmptySeries(series_uid.to_string()));
    }
    let internal = ClassSet::internal(modality);
    let per_image: Vec<Prediction> = predictions
        .iter()
        .map(|p| {
            if p.classes == internal {
                Ok(p.clone())
            } else {
                p.restrict(&internal)
                    .ok_or_else(|| PostprocessError::NoModalityMass(p.sop_uid.clone()))
            }
        })
        .collect::<Result<_, _>>()?;
    let n = per_image.len() as f64;
    let mean_margin = per_image.iter().map(|p| p.margin).sum::<f64>() / n;
    let mean_entropy = per_image.iter().map(|p| p.entropy).sum::<f64>() / n;

    let predicted: Vec<BodyRegion> = per_image.iter().map(|p| p.label).collect();
    let mut trace = vec![(Stage::Predicted, predicted.clone())];

    let target = merge_target(&predicted);
    let merged = merge_abdomen_chest(&predicted);
    trace.push((Stage::Merge, merged.clone()));

    let after_breast = apply_breast_rule(&merged, modality, config.breast_fraction);
    trace.push((Stage::Breast, after_breast.clone()));

    let status = reject_uncertain(&per_image, config.metric, config.threshold, modality);
    let mut result = SeriesResult {
        series_uid: series_uid.to_string(),
        modality: modality.clone(),
        per_image,
        final_labels: Vec::new(),
        status,
        series_regions: BTreeSet::new(),
        trace,
        mean_margin,
        mean_entropy,
    };
    if status == SeriesStatus::RejectedUncertain {
        return Ok(result);
    }

    let cleaned = remove_outlier_runs(&after_breast, config.min_run);
    result.trace.push((Stage::OutlierRemoval, cleaned.clone()));

    let output = ClassSet::output(modality);
    let vectors: Vec<Vec<f64>> = result
        .per_image
        .iter()
        .zip(&cleaned)
        .map(|(p, label)| {
            let folded: Vec<f64> = output
                .iter()
                .map(|r| {
                    let extra = if r == target { p.probability(BodyRegion::AbdomenChest) } else { 0.0 };
                    p.probability(r) + extra
                })
                .collect();
            let k = output.index_of(*label).expect("merged labels are output classes");
            if folded.iter().all(|v| *v <= folded[k]) {
                folded
            } else {
                // relabelled by a rule: its vector no longer supports the label
                let mut one_hot = vec![0.0; output.len()];
                one_hot[k] = 1.0;
                one_hot
            }
        })
        .collect();
    let smoothed = smooth_labels(&vectors, &cleaned, &output, config.window);
    result.trace.push((Stage::Smoothing, smoothed.clone()));
    result.series_regions = smoothed.iter().copied().collect();
    result.final_labels = smoothed;
    Ok(result)
}

/// Per-image line of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageOutcome {
    pub sop_uid: String,
    /// Backend argmax before any series rule.
    pub predicted: BodyRegion,
    /// Final label; absent for rejected series.
    pub label: Option<BodyRegion>,
    pub margin: f64,
    pub entropy: f64,
}

/// Serialized form of a [`SeriesResult`], one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesOutcome {
    pub series_uid: String,
    pub modality: Modality,
    pub status: SeriesStatus,
    pub images: Vec<ImageOutcome>,
    pub series_regions: BTreeSet<BodyRegion>,
}

impl From<&SeriesResult> for SeriesOutcome {
    fn from(r: &SeriesResult) -> Self {
        SeriesOutcome {
            series_uid: r.series_uid.clone(),
            modality: r.modality.clone(),
            status: r.status,
            images: r
                .per_image
                .iter()
                .enumerate()
                .map(|(i, p)| ImageOutcome {
                    sop_uid: p.sop_uid.clone(),
                    predicted: p.label,
                    label: r.final_labels.get(i).copied(),
                    margin: p.margin,
                    entropy: p.entropy,
                })
                .collect(),
            series_regions: r.series_regions.clone(),
        }
    }
}

impl SeriesOutcome {
    /// The most frequent final label, earliest class on ties.
    pub fn predominant_label(&self) -> Option<BodyRegion> {
        let labels: Vec<BodyRegion> = self.images.iter().filter_map(|i| i.label).collect();
        let mut best: Option<(BodyRegion, usize)> = None;
        for r in BodyRegion::ALL {
            let c = count(&labels, r);
            if c > 0 && best.is_none_or(|(_, bc)| c > bc) {
                best = Some((r, c));
            }
        }
        best.map(|(r, _)| r)
    }
}

pub fn write_results_ndjson<W: Write>(results: &[SeriesOutcome], mut out: W) -> std::io::Result<()> {
    for r in results {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[derive(Debug, thiserror::Error)]
pub enum ResultsError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("results line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
}

pub fn read_results_ndjson<R: BufRead>(input: R) -> Result<Vec<SeriesOutcome>, ResultsError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| ResultsError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use BodyRegion::*;

    fn one_hot_series(labels: &[BodyRegion], modality: &Modality) -> Vec<Prediction> {
        let set = ClassSet::internal(modality);
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| Prediction::one_hot(format!("{i}"), set.clone(), *l).unwrap())
            .collect()
    }

    #[test]
    fn merge_cases() {
        assert_eq!(merge_abdomen_chest(&[AbdomenChest, Chest, Chest]), vec![Chest, Chest, Chest]);
        assert_eq!(merge_abdomen_chest(&[AbdomenChest]), vec![Abdomen]);
        assert_eq!(merge_abdomen_chest(&[AbdomenChest, Abdomen, Chest]), vec![Abdomen, Abdomen, Chest]);
    }

    #[test]
    fn breast_boundary() {
        let mut labels = vec![Breast; 5];
        labels.extend([Chest; 5]);
        assert_eq!(apply_breast_rule(&labels, &Modality::Mr, 0.5), vec![Breast; 10]);
        labels[4] = Chest;
        assert_eq!(apply_breast_rule(&labels, &Modality::Mr, 0.5), labels);
        let all = [Breast; 10];
        assert_eq!(apply_breast_rule(&all[..6], &Modality::Ct, 0.5), all[..6].to_vec());
    }

    #[test]
    fn ct_breast_scores_are_dropped() {
        let mr = ClassSet::internal(&Modality::Mr);
        let mut v = vec![0.0; mr.len()];
        v[mr.index_of(Breast).unwrap()] = 0.7;
        v[mr.index_of(Chest).unwrap()] = 0.3;
        let preds: Vec<Prediction> = (0..4).map(|i| Prediction::new(format!("{i}"), mr.clone(), v.clone()).unwrap()).collect();
        let r = run_pipeline("s", &preds, &Modality::Ct, &PostprocessConfig::default()).unwrap();
        assert_eq!(r.final_labels, vec![Chest; 4]);
    }

    #[test]
    fn uncertainty() {
        let mr = ClassSet::internal(&Modality::Mr);
        let k = mr.len();
        let uniform: Vec<Prediction> = (0..3).map(|i| Prediction::new(format!("{i}"), mr.clone(), vec![1.0 / k as f64; k]).unwrap()).collect();
        assert_eq!(reject_uncertain(&uniform, UncertaintyMetric::Margin, 0.01, &Modality::Mr), SeriesStatus::RejectedUncertain);
        assert_eq!(reject_uncertain(&uniform, UncertaintyMetric::Margin, 0.01, &Modality::Ct), SeriesStatus::Accepted);
        let hot = one_hot_series(&[Head, Head], &Modality::Mr);
        assert_eq!(reject_uncertain(&hot, UncertaintyMetric::Entropy, 0.5, &Modality::Mr), SeriesStatus::Accepted);

        // margins 0.5 and 0.1: mean 0.3
        let two = ClassSet::new(vec![Head, Neck]).unwrap();
        let mixed = vec![
            Prediction::new("a", two.clone(), vec![0.75, 0.25]).unwrap(),
            Prediction::new("b", two, vec![0.55, 0.45]).unwrap(),
        ];
        assert_eq!(reject_uncertain(&mixed, UncertaintyMetric::Margin, 0.25, &Modality::Mr), SeriesStatus::Accepted);
        assert_eq!(reject_uncertain(&mixed, UncertaintyMetric::Margin, 0.35, &Modality::Mr), SeriesStatus::RejectedUncertain);
    }

    #[test]
    fn outlier_runs() {
        assert_eq!(remove_outlier_runs(&[Head, Head, Neck, Head, Head], 3), vec![Head; 5]);
        assert_eq!(remove_outlier_runs(&[Head, Head, Head], 3), vec![Head; 3]);
        let edge = [Head, Neck, Neck, Neck, Chest];
        assert_eq!(remove_outlier_runs(&edge, 3), edge.to_vec());
        // longer neighbour wins
        assert_eq!(
            remove_outlier_runs(&[Head, Head, Neck, Chest, Chest, Chest], 3),
            vec![Head, Head, Chest, Chest, Chest, Chest]
        );
    }

    #[test]
    fn smoothing() {
        let set = ClassSet::new(vec![Head, Neck]).unwrap();
        let labels = [Head, Head, Neck, Head, Head];
        let vectors: Vec<Vec<f64>> = labels.iter().map(|l| if *l == Head { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
        assert_eq!(smooth_labels(&vectors, &labels, &set, 3), vec![Head; 5]);
        assert_eq!(smooth_labels(&vectors[..1], &labels[..1], &set, 3), vec![Head]);
        let constant = vec![vec![0.3, 0.7]; 4];
        assert_eq!(smooth_labels(&constant, &[Neck; 4], &set, 3), vec![Neck; 4]);
    }

    #[test]
    fn pipeline_trace_and_errors() {
        let cfg = PostprocessConfig::default();
        assert!(matches!(run_pipeline("s", &[], &Modality::Ct, &cfg), Err(PostprocessError::EmptySeries(_))));
        let clean = one_hot_series(&[Head, Head, Head, Neck, Neck, Neck], &Modality::Ct);
        let r = run_pipeline("s", &clean, &Modality::Ct, &cfg).unwrap();
        assert_eq!(r.final_labels, vec![Head, Head, Head, Neck, Neck, Neck]);

        let labels = [Chest, AbdomenChest, Chest, Chest, Knee, Chest, Chest, Abdomen];
        let r = run_pipeline("s", &one_hot_series(&labels, &Modality::Mr), &Modality::Mr, &cfg).unwrap();
        let stages: Vec<Stage> = r.trace.iter().map(|(s, _)| *s).collect();
        assert_eq!(stages, [Stage::Predicted, Stage::Merge, Stage::Breast, Stage::OutlierRemoval, Stage::Smoothing]);
        assert_eq!(r.trace[1].1[1], Chest);
        assert_eq!(r.trace[3].1[4], Chest);
        assert_eq!(r.final_labels, vec![Chest, Chest, Chest, Chest, Chest, Chest, Chest, Abdomen]);
        assert_eq!(r.series_regions, [Abdomen, Chest].into_iter().collect());
    }

    #[test]
    fn rejected_series_has_no_labels() {
        let mr = ClassSet::internal(&Modality::Mr);
        let k = mr.len();
        let uniform: Vec<Prediction> = (0..3).map(|i| Prediction::new(format!("{i}"), mr.clone(), vec![1.0 / k as f64; k]).unwrap()).collect();
        let r = run_pipeline("s", &uniform, &Modality::Mr, &PostprocessConfig::default()).unwrap();
        assert_eq!(r.status, SeriesStatus::RejectedUncertain);
        assert!(r.final_labels.is_empty());
        let outcome = SeriesOutcome::from(&r);
        assert!(outcome.images.iter().all(|i| i.label.is_none()));
    }

    fn region_strategy(with_breast: bool) -> impl Strategy<Value = BodyRegion> {
        let pool: Vec<BodyRegion> = BodyRegion::ALL
            .into_iter()
            .filter(|r| with_breast || *r != Breast)
            .collect();
        proptest::sample::select(pool)
    }

    proptest! {
        #[test]
        fn no_abdomen_chest_in_output(
            raw in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 19), 1..40),
            mr in any::<bool>(),
        ) {
            let modality = if mr { Modality::Mr } else { Modality::Ct };
            let all = ClassSet::internal(&Modality::Mr);
            let preds: Vec<Prediction> = raw.iter().enumerate().map(|(i, v)| {
                let s: f64 = v.iter().sum::<f64>() + 1e-9;
                let mut p: Vec<f64> = v.iter().map(|x| (x + 1e-9 / 19.0) / s).collect();
                let t: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= t);
                Prediction::new(format!("{i}"), all.clone(), p).unwrap()
            }).collect();
            let cfg = PostprocessConfig { threshold: 0.0, ..Default::default() };
            let r = run_pipeline("s", &preds, &modality, &cfg).unwrap();
            prop_assert_eq!(r.final_labels.len(), preds.len());
            prop_assert!(!r.final_labels.contains(&AbdomenChest));
            if !mr { prop_assert!(!r.final_labels.contains(&Breast)); }
        }

        #[test]
        fn outlier_removal_closure_and_transitions(labels in proptest::collection::vec(region_strategy(true), 1..60), min_run in 1usize..6) {
            let out = remove_outlier_runs(&labels, min_run);
            prop_assert_eq!(out.len(), labels.len());
            let input: BTreeSet<_> = labels.iter().collect();
            prop_assert!(out.iter().all(|l| input.contains(l)));
            let transitions = |s: &[BodyRegion]| s.windows(2).filter(|w| w[0] != w[1]).count();
            prop_assert!(transitions(&out) <= transitions(&labels));
            let r = runs(&out);
            for run in r.iter().skip(1).take(r.len().saturating_sub(2)) {
                prop_assert!(run.2 >= min_run);
            }
        }

        #[test]
        fn smoothing_stays_within_window(
            raw in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 4), 1..40),
        ) {
            let set = ClassSet::new(vec![Abdomen, Chest, Head, Neck]).unwrap();
            let labels: Vec<BodyRegion> = raw.iter().map(|v| {
                let k = (0..4).fold(0, |b, i| if v[i] > v[b] { i } else { b });
                set.get(k).unwrap()
            }).collect();
            let out = smooth_labels(&raw, &labels, &set, 3);
            for (i, l) in out.iter().enumerate() {
                let lo = i.saturating_sub(1);
                let hi = (i + 2).min(labels.len());
                prop_assert!(labels[lo..hi].contains(l));
            }
        }

        #[test]
        fn pipeline_is_idempotent_on_its_output(
            labels in proptest::collection::vec(region_strategy(false), 1..50),
            mr in any::<bool>(),
        ) {
            let modality = if mr { Modality::Mr } else { Modality::Ct };
            let cfg = PostprocessConfig::default();
            let first = run_pipeline("s", &one_hot_series(&labels, &modality), &modality, &cfg).unwrap();
            let second = run_pipeline("s", &one_hot_series(&first.final_labels, &modality), &modality, &cfg).unwrap();
            prop_assert_eq!(&second.final_labels, &first.final_labels);
            let third = run_pipeline("s", &one_hot_series(&labels, &modality), &modality, &cfg).unwrap();
            prop_assert_eq!(third, first);
        }
    }
}
