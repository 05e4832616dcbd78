//! Per-image truth and prediction pairs grouped by study and series.

use std::collections::HashMap;

use crate::classify::BodyRegion;
use crate::geometry::slice_geometry;
use crate::ingest::StudyRecord;
use crate::postprocess::SeriesOutcome;

use super::confusion::ConfusionMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub sop_uid: String,
    /// Position along the slice normal, mm.
    pub position: f64,
    pub truth: BodyRegion,
    /// `None` for images of rejected series; they count in no metric.
    pub predicted: Option<BodyRegion>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSeries {
    pub series_uid: String,
    pub images: Vec<EvalImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalStudy {
    pub study_uid: String,
    pub series: Vec<EvalSeries>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalCohort {
    pub studies: Vec<EvalStudy>,
}

impl EvalCohort {
    pub fn image_count(&self) -> usize {
        self.images().count()
    }

    pub fn images(&self) -> impl Iterator<Item = &EvalImage> {
        self.studies.iter().flat_map(|s| s.series.iter().flat_map(|se| se.images.iter()))
    }

    /// Confusion matrix over every evaluated image, all regions.
    pub fn confusion(&self) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::all_regions();
        for im in self.images() {
            if let Some(p) = im.predicted {
                cm.add_indexed(im.truth.canonical_index(), p.canonical_index(), 1);
            }
        }
        cm
    }

    /// Keeps the series for which `keep(study_uid, series_uid)` holds and
    /// drops studies left without series.
    pub fn select(&self, keep: impl Fn(&str, &str) -> bool) -> EvalCohort {
        EvalCohort {
            studies: self
                .studies
                .iter()
                .filter_map(|st| {
                    let series: Vec<EvalSeries> = st
                        .series
                        .iter()
                        .filter(|se| keep(&st.study_uid, &se.series_uid))
                        .cloned()
                        .collect();
                    (!series.is_empty()).then(|| EvalStudy {
                        study_uid: st.study_uid.clone(),
                        series,
                    })
                })
                .collect(),
        }
    }
}

/// Joins study metadata, per-image truth and series outcomes.
///
/// Images without truth, or with AbdomenChest truth (never an output
/// class), are left out, as are series without an outcome. Returns the
/// cohort and one warning per series whose geometry fell back to image
/// order.
pub fn build_eval_cohort(
    studies: &[StudyRecord],
    truth: &HashMap<String, BodyRegion>,
    outcomes: &[SeriesOutcome],
) -> (EvalCohort, Vec<String>) {
    let by_series: HashMap<&str, &SeriesOutcome> = outcomes.iter().map(|o| (o.series_uid.as_str(), o)).collect();
    let mut warnings = Vec::new();
    let mut cohort = EvalCohort::default();
    for study in studies {
        let mut eval_study = EvalStudy {
            study_uid: study.study_uid.clone(),
            series: Vec::new(),
        };
        for series in &study.series {
            let Some(outcome) = by_series.get(series.series_uid.as_str()) else {
                continue;
            };
            let labels: HashMap<&str, Option<BodyRegion>> =
                outcome.images.iter().map(|i| (i.sop_uid.as_str(), i.label)).collect();
            let positions = match slice_geometry(series) {
                Ok((g, _)) => g.positions,
                Err(e) => {
                    warnings.push(format!("series {}: {e}; using image order", series.series_uid));
                    (0..series.images.len()).map(|i| i as f64).collect()
                }
            };
            let images: Vec<EvalImage> = series
                .images
                .iter()
                .zip(positions)
                .filter_map(|(im, position)| {
                    let t = *truth.get(&im.sop_uid)?;
                    if t == BodyRegion::AbdomenChest {
                        return None;
                    }
                    let predicted = *labels.get(im.sop_uid.as_str())?;
                    Some(EvalImage {
                        sop_uid: im.sop_uid.clone(),
                        position,
                        truth: t,
                        predicted,
                    })
                })
                .collect();
            if !images.is_empty() {
                eval_study.series.push(EvalSeries {
                    series_uid: series.series_uid.clone(),
                    images,
                });
            }
        }
        if !eval_study.series.is_empty() {
            cohort.studies.push(eval_study);
        }
    }
    (cohort, warnings)
}
