//! Agreement between free-text DICOM body-part tags and predicted regions.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::classify::BodyRegion;
use crate::ingest::StudyRecord;
use crate::postprocess::{SeriesOutcome, SeriesStatus};

const DEFAULT_SYNONYMS: &str = include_str!("../../data/body_part_synonyms.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TagKind {
    /// (0018,0015) BodyPartExamined
    BodyPart,
    /// Procedure / study description text
    Procedure,
}

impl std::str::FromStr for TagKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "body_part" | "bp" => Ok(TagKind::BodyPart),
            "procedure" | "pt" => Ok(TagKind::Procedure),
            other => Err(format!("unknown tag kind {other:?}")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynonymError {
    #[error("synonym map is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("synonym {key:?} names unknown region {region:?}")]
    UnknownRegion { key: String, region: String },
}

/// Normalized tag value to the set of regions it denotes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynonymMap(BTreeMap<String, BTreeSet<BodyRegion>>);

fn normalize(value: &str) -> String {
    value.chars().filter(char::is_ascii_alphanumeric).map(|c| c.to_ascii_uppercase()).collect()
}

impl Default for SynonymMap {
    fn default() -> Self {
        SynonymMap::from_json(DEFAULT_SYNONYMS).expect("bundled synonym map is valid")
    }
}

impl SynonymMap {
    /// Parses `{"TAG": ["Region", ...], ...}`. Keys are normalized to
    /// uppercase alphanumerics.
    pub fn from_json(text: &str) -> Result<Self, SynonymError> {
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(text)?;
        let mut map = BTreeMap::new();
        for (key, regions) in raw {
            let set = regions
                .iter()
                .map(|r| {
                    r.parse::<BodyRegion>().map_err(|_| SynonymError::UnknownRegion {
                        key: key.clone(),
                        region: r.clone(),
                    })
                })
                .collect::<Result<BTreeSet<_>, _>>()?;
            map.entry(normalize(&key)).or_insert_with(BTreeSet::new).extend(set);
        }
        Ok(SynonymMap(map))
    }

    /// Regions for a tag value: an exact match of the whole normalized
    /// value, else the union over its words. Empty when nothing maps.
    pub fn lookup(&self, value: &str) -> BTreeSet<BodyRegion> {
        if let Some(set) = self.0.get(&normalize(value)) {
            return set.clone();
        }
        value
            .split(|c: char| !c.is_ascii_alphanumeric())
            .filter_map(|w| self.0.get(&normalize(w)))
            .flatten()
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementRow {
    pub study_uid: String,
    pub tag: Option<String>,
    pub mapped: BTreeSet<BodyRegion>,
    pub predicted: BTreeSet<BodyRegion>,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TagAgreement {
    pub kind: TagKind,
    pub matched: usize,
    pub studies: usize,
    /// `None` when no study had predictions.
    pub fraction: Option<f64>,
    pub rows: Vec<AgreementRow>,
}

/// Union of the output regions of each study's accepted series.
pub fn study_predictions(studies: &[StudyRecord], outcomes: &[SeriesOutcome]) -> BTreeMap<String, BTreeSet<BodyRegion>> {
    let by_series: HashMap<&str, &SeriesOutcome> = outcomes.iter().map(|o| (o.series_uid.as_str(), o)).collect();
    let mut out = BTreeMap::new();
    for study in studies {
        let mut any = false;
        let mut regions = BTreeSet::new();
        for series in &study.series {
            if let Some(o) = by_series.get(series.series_uid.as_str()) {
                any = true;
                if o.status == SeriesStatus::Accepted {
                    regions.extend(o.series_regions.iter().copied());
                }
            }
        }
        if any {
            out.insert(study.study_uid.clone(), regions);
        }
    }
    out
}

/// Fraction of studies whose tag maps to at least one predicted region.
/// Missing and unmapped tags count as disagreement; studies absent from
/// `predicted` are not counted.
pub fn tag_agreement(
    studies: &[StudyRecord],
    predicted: &BTreeMap<String, BTreeSet<BodyRegion>>,
    kind: TagKind,
    synonyms: &SynonymMap,
) -> TagAgreement {
    let rows: Vec<AgreementRow> = studies
        .iter()
        .filter_map(|study| {
            let regions = predicted.get(&study.study_uid)?;
            let tag = match kind {
                TagKind::BodyPart => study.body_part_examined.clone(),
                TagKind::Procedure => study.procedure_description.clone(),
            }
            .filter(|t| !t.trim().is_empty());
            let mapped = tag.as_deref().map(|t| synonyms.lookup(t)).unwrap_or_default();
            let matched = !mapped.is_disjoint(regions);
            Some(AgreementRow {
                study_uid: study.study_uid.clone(),
                tag,
                mapped,
                predicted: regions.clone(),
                matched,
            })
        })
        .collect();
    let matched = rows.iter().filter(|r| r.matched).count();
    TagAgreement {
        kind,
        matched,
        studies: rows.len(),
        fraction: (!rows.is_empty()).then(|| matched as f64 / rows.len() as f64),
        rows,
    }
}
