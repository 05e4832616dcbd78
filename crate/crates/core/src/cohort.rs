//! Series and image inclusion rules, patient de-duplication, train/validation
//! partitioning and audit sampling.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classify::{BodyRegion, Modality};
use crate::geometry::{axial_angle, within_axial_limit};
use crate::ingest::dicom::ts;
use crate::ingest::{ImageRecord, SeriesRecord, StudyRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FilterReason {
    Included,
    WrongModality,
    NotAxial,
    KeywordExcluded,
    MPRorDerived,
    LowBitDepth,
    MultiChannel,
    NoPixelData,
    TooFewPixels,
    UnsupportedCodec,
}

impl FilterReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterReason::Included => "Included",
            FilterReason::WrongModality => "WrongModality",
            FilterReason::NotAxial => "NotAxial",
            FilterReason::KeywordExcluded => "KeywordExcluded",
            FilterReason::MPRorDerived => "MPRorDerived",
            FilterReason::LowBitDepth => "LowBitDepth",
            FilterReason::MultiChannel => "MultiChannel",
            FilterReason::NoPixelData => "NoPixelData",
            FilterReason::TooFewPixels => "TooFewPixels",
            FilterReason::UnsupportedCodec => "UnsupportedCodec",
        }
    }
}

impl fmt::Display for FilterReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterDecision {
    pub included: bool,
    pub reason: FilterReason,
    pub detail: String,
}

impl FilterDecision {
    pub fn include(detail: impl Into<String>) -> Self {
        FilterDecision {
            included: true,
            reason: FilterReason::Included,
            detail: detail.into(),
        }
    }

    pub fn exclude(reason: FilterReason, detail: impl Into<String>) -> Self {
        debug_assert_ne!(reason, FilterReason::Included);
        FilterDecision {
            included: false,
            reason,
            detail: detail.into(),
        }
    }
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// Thresholds and keyword lists for the inclusion rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub max_axial_angle_deg: f64,
    /// Images whose stored bit depth is at or below this are excluded.
    pub max_excluded_bits: u16,
    pub min_pixels: usize,
    pub mr_keywords: Vec<String>,
    pub ct_keywords: Vec<String>,
    /// Matched against whole words of the series description.
    pub derived_keywords: Vec<String>,
    pub strict_geometry: bool,
    pub accepted_transfer_syntaxes: Vec<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            max_axial_angle_deg: 45.0,
            max_excluded_bits: 8,
            min_pixels: 1000,
            mr_keywords: strings(&[
                "FLOW",
                "VELOCITY",
                "ADC",
                "APPARENT DIFFUSION",
                "IDEAL",
                "EP2D_DIFF",
                "FASTPC",
                "PC",
                "CBV",
                "CBF",
                "MTT",
                "TTP",
                "CAD",
                "DWI_SSH",
                "VIPR",
            ]),
            ct_keywords: strings(&["VELOCITY"]),
            derived_keywords: strings(&[
                "SCOUT",
                "LOCALIZER",
                "LOCALISER",
                "REFORMAT",
                "MPR",
                "SECONDARY",
                "DOSE",
                "CINE",
                "3D",
            ]),
            strict_geometry: false,
            accepted_transfer_syntaxes: strings(&[
                ts::IMPLICIT_VR_LE,
                ts::EXPLICIT_VR_LE,
                ts::RLE_LOSSLESS,
                ts::JPEG_LOSSLESS,
                ts::JPEG_LOSSLESS_SV1,
            ]),
        }
    }
}

fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_ascii_alphanumeric()).filter(|w| !w.is_empty())
}

/// Series-level rules, checked in order: modality, orientation, modality
/// keyword list (substring), derived-series keywords (whole word).
pub fn filter_series(series: &SeriesRecord, config: &FilterConfig) -> FilterDecision {
    let keywords = match series.modality {
        Modality::Ct => &config.ct_keywords,
        Modality::Mr => &config.mr_keywords,
        Modality::Other(ref m) => {
            return FilterDecision::exclude(FilterReason::WrongModality, format!("modality {m:?}"));
        }
    };

    let mut max_angle: Option<f64> = None;
    for image in &series.images {
        if let Some(o) = &image.image_orientation_patient {
            match axial_angle(o) {
                Ok(a) => max_angle = Some(max_angle.map_or(a, |m: f64| m.max(a))),
                Err(e) => return FilterDecision::exclude(FilterReason::NotAxial, e.to_string()),
            }
        }
    }
    let mut note = String::new();
    match max_angle {
        Some(a) if !within_axial_limit(a, config.max_axial_angle_deg) => {
            return FilterDecision::exclude(FilterReason::NotAxial, format!("slice tilt {a:.1} degrees"));
        }
        Some(_) => {}
        None if config.strict_geometry => {
            return FilterDecision::exclude(FilterReason::NotAxial, "no orientation (strict geometry)");
        }
        None => note = "no orientation, assumed axial".to_string(),
    }

    let description = series.series_description.as_deref().unwrap_or("").to_uppercase();
    if let Some(k) = keywords.iter().find(|k| !k.is_empty() && description.contains(&k.to_uppercase())) {
        return FilterDecision::exclude(FilterReason::KeywordExcluded, format!("description contains {k:?}"));
    }
    if let Some(k) = config
        .derived_keywords
        .iter()
        .find(|k| words(&description).any(|w| w.eq_ignore_ascii_case(k)))
    {
        return FilterDecision::exclude(FilterReason::MPRorDerived, format!("description word {k:?}"));
    }
    FilterDecision::include(note)
}

/// Image-level rules, checked in order: bit depth, channels, pixel data,
/// pixel count, transfer syntax. Absent attributes fail the rule that needs
/// them, except SamplesPerPixel, which defaults to one.
pub fn filter_image(image: &ImageRecord, config: &FilterConfig) -> FilterDecision {
    match image.effective_bits_stored() {
        None => return FilterDecision::exclude(FilterReason::LowBitDepth, "bit depth unknown"),
        Some(b) if b <= config.max_excluded_bits => {
            return FilterDecision::exclude(FilterReason::LowBitDepth, format!("{b} bits stored"));
        }
        Some(_) => {}
    }
    if let Some(s) = image.samples_per_pixel.filter(|s| *s > 1) {
        return FilterDecision::exclude(FilterReason::MultiChannel, format!("{s} samples per pixel"));
    }
    if !image.has_pixel_data {
        return FilterDecision::exclude(FilterReason::NoPixelData, "no (7FE0,0010) element");
    }
    match image.pixel_count() {
        None => return FilterDecision::exclude(FilterReason::TooFewPixels, "dimensions unknown"),
        Some(n) if n < config.min_pixels => {
            return FilterDecision::exclude(FilterReason::TooFewPixels, format!("{n} pixels"));
        }
        Some(_) => {}
    }
    if !config.accepted_transfer_syntaxes.contains(&image.transfer_syntax_uid) {
        return FilterDecision::exclude(
            FilterReason::UnsupportedCodec,
            format!("transfer syntax {:?}", image.transfer_syntax_uid),
        );
    }
    FilterDecision::include("")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterLevel {
    Series,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FilterRow {
    pub uid: String,
    pub level: FilterLevel,
    pub included: bool,
    pub reason: FilterReason,
    pub detail: String,
}

impl FilterRow {
    fn new(uid: &str, level: FilterLevel, d: FilterDecision) -> Self {
        FilterRow {
            uid: uid.to_string(),
            level,
            included: d.included,
            reason: d.reason,
            detail: d.detail,
        }
    }
}

/// Applies both rule levels to a cohort.
///
/// Every series and every image gets one report row; images of an excluded
/// series carry the series' reason. The returned cohort keeps included
/// images only and drops series and studies left empty.
pub fn filter_cohort(studies: &[StudyRecord], config: &FilterConfig) -> (Vec<StudyRecord>, Vec<FilterRow>) {
    let mut rows = Vec::new();
    let mut kept = Vec::new();
    for study in studies {
        let mut out = study.clone();
        out.series.clear();
        for series in &study.series {
            let sd = filter_series(series, config);
            rows.push(FilterRow::new(&series.series_uid, FilterLevel::Series, sd.clone()));
            let mut s = series.clone();
            s.images.clear();
            for image in &series.images {
                let d = if sd.included {
                    filter_image(image, config)
                } else {
                    FilterDecision::exclude(sd.reason, "series excluded")
                };
                if d.included {
                    s.images.push(image.clone());
                }
                rows.push(FilterRow::new(&image.sop_uid, FilterLevel::Image, d));
            }
            if !s.images.is_empty() {
                out.series.push(s);
            }
        }
        if !out.series.is_empty() {
            kept.push(out);
        }
    }
    (kept, rows)
}

pub fn write_filter_report<W: Write>(rows: &[FilterRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["uid", "level", "included", "reason", "detail"])?;
    for r in rows {
        let level = match r.level {
            FilterLevel::Series => "series",
            FilterLevel::Image => "image",
        };
        w.write_record([r.uid.as_str(), level, if r.included { "true" } else { "false" }, r.reason.as_str(), &r.detail])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CohortError {
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("ratio {0} must lie in [0, 1]")]
    InvalidRatio(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DedupeResult {
    pub studies: Vec<StudyRecord>,
    /// Studies without a patient id; kept but not de-duplicated.
    pub missing_patient_id: Vec<String>,
}

/// Keeps one study per patient, chosen uniformly at random.
/// Output preserves input order.
pub fn dedupe_patients(studies: &[StudyRecord], rng: &mut impl Rng) -> DedupeResult {
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut keep = vec![false; studies.len()];
    let mut missing = Vec::new();
    for (i, s) in studies.iter().enumerate() {
        match s.patient_id.as_deref().filter(|p| !p.is_empty()) {
            Some(p) => by_patient.entry(p).or_default().push(i),
            None => {
                keep[i] = true;
                missing.push(s.study_uid.clone());
            }
        }
    }
    for indices in by_patient.values() {
        keep[indices[rng.random_range(0..indices.len())]] = true;
    }
    DedupeResult {
        studies: studies
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(s, _)| s.clone())
            .collect(),
        missing_patient_id: missing,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionInput {
    pub study_uid: String,
    pub region: BodyRegion,
    pub image_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionAssignment {
    pub study_uid: String,
    pub split: Split,
    pub region: BodyRegion,
}

fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Splits each region group, sorted by descending image count, so that
/// after any prefix of k studies round(k·ratio) are in Train. With ratio
/// 0.75 this deals Train, Train, Validation, Train repeatedly, spreading
/// large and small studies over both splits.
pub fn partition_patients(studies: &[PartitionInput], ratio: f64) -> Result<Vec<PartitionAssignment>, CohortError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(CohortError::InvalidRatio(ratio.to_string()));
    }
    if studies.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    let mut groups: BTreeMap<BodyRegion, Vec<&PartitionInput>> = BTreeMap::new();
    for s in studies {
        groups.entry(s.region).or_default().push(s);
    }
    let mut out = Vec::with_capacity(studies.len());
    for (region, mut group) in groups {
        group.sort_by(|a, b| b.image_count.cmp(&a.image_count).then_with(|| a.study_uid.cmp(&b.study_uid)));
        for (i, s) in group.into_iter().enumerate() {
            let train = round_half_up((i + 1) as f64 * ratio) > round_half_up(i as f64 * ratio);
            out.push(PartitionAssignment {
                study_uid: s.study_uid.clone(),
                split: if train { Split::Train } else { Split::Validation },
                region,
            });
        }
    }
    Ok(out)
}

/// Draws ⌈fraction·N⌉ studies spread as evenly as region sizes allow.
///
/// Quotas are filled level by level; regions that run out of studies drop
/// out and the remainder goes to randomly chosen regions. Studies are drawn
/// at random within each region. Output is grouped by region.
pub fn audit_sample(
    studies: &[(String, BodyRegion)],
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<Vec<String>, CohortError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CohortError::InvalidRatio(fraction.to_string()));
    }
    if studies.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    let mut groups: BTreeMap<BodyRegion, Vec<&str>> = BTreeMap::new();
    for (uid, region) in studies {
        groups.entry(*region).or_default().push(uid);
    }
    let total = ((fraction * studies.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let regions: Vec<BodyRegion> = groups.keys().copied().collect();
    let capacity: Vec<usize> = regions.iter().map(|r| groups[r].len()).collect();
    let mut quota = vec![0usize; regions.len()];
    let mut remaining = total;
    while remaining > 0 {
        let open: Vec<usize> = (0..regions.len()).filter(|&i| quota[i] < capacity[i]).collect();
        if open.is_empty() {
            break;
        }
        let share = remaining / open.len();
        if share == 0 {
            let extra: Vec<usize> = open.choose_multiple(rng, remaining).copied().collect();
            for i in extra {
                quota[i] += 1;
            }
            break;
        }
        for &i in &open {
            let add = share.min(capacity[i] - quota[i]);
            quota[i] += add;
            remaining -= add;
        }
    }
    let mut out = Vec::with_capacity(total);
    for (i, region) in regions.iter().enumerate() {
        let mut members = groups[region].clone();
        members.shuffle(rng);
        out.extend(members.into_iter().take(quota[i]).map(str::to_string));
    }
    Ok(out)
}
