//! Accuracy broken down by acquisition and demographic factors.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::classify::Modality;
use crate::ingest::{Sex, SeriesRecord, StudyRecord};

use super::bootstrap::{bootstrap_many, weighted_sensitivity_metric, weighted_specificity_metric, BootstrapConfig, BootstrapError, CIResult};
use super::chisq::{chi_square, Association, ChiSquare, FactorTable};
use super::evaluation::EvalCohort;

pub const UNKNOWN: &str = "Unknown";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Factor {
    Institution,
    Age,
    Gender,
    Manufacturer,
    Contrast,
    SliceThickness,
    CtKernel,
    MriSequence,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FactorError {
    #[error("unknown factor `{0}`")]
    UnknownFactor(String),
    #[error(transparent)]
    Bootstrap(#[from] BootstrapError),
}

impl Factor {
    pub const ALL: [Factor; 8] = [
        Factor::Institution,
        Factor::Age,
        Factor::Gender,
        Factor::Manufacturer,
        Factor::Contrast,
        Factor::SliceThickness,
        Factor::CtKernel,
        Factor::MriSequence,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Factor::Institution => "Institution",
            Factor::Age => "Age",
            Factor::Gender => "Gender",
            Factor::Manufacturer => "Manufacturer",
            Factor::Contrast => "Contrast",
            Factor::SliceThickness => "Slice thickness",
            Factor::CtKernel => "CT kernel",
            Factor::MriSequence => "MRI Sequence",
        }
    }

    /// Series-level factors count series; the others count studies.
    pub fn series_level(self) -> bool {
        matches!(self, Factor::Contrast | Factor::SliceThickness | Factor::CtKernel | Factor::MriSequence)
    }

    pub fn applies_to(self, modality: &Modality) -> bool {
        match self {
            Factor::CtKernel => *modality == Modality::Ct,
            Factor::MriSequence => *modality == Modality::Mr,
            _ => true,
        }
    }

    /// Categories listed first, in this order, when present.
    fn preferred_order(self) -> &'static [&'static str] {
        match self {
            Factor::Age => &[AGE_18_44, AGE_45_64, AGE_65],
            Factor::Gender => &["Female", "Male", "Other"],
            Factor::Contrast => &["With contrast", "Without contrast"],
            Factor::SliceThickness => &[THIN, MEDIUM, THICK],
            Factor::CtKernel => &["Bone", "Soft tissue"],
            Factor::MriSequence => SEQUENCE_GROUP_ORDER,
            _ => &[],
        }
    }

    /// Category of a series, `None` when the factor does not apply to it.
    pub fn category(self, study: &StudyRecord, series: &SeriesRecord) -> Option<String> {
        if !self.applies_to(&series.modality) {
            return None;
        }
        let text = |v: &Option<String>| v.as_deref().map(str::trim).filter(|s| !s.is_empty()).map(str::to_string);
        Some(match self {
            Factor::Institution => text(&study.institution).unwrap_or_else(|| UNKNOWN.into()),
            Factor::Age => age_bucket(study.patient_age).into(),
            Factor::Gender => match study.patient_sex {
                Some(Sex::Female) => "Female".into(),
                Some(Sex::Male) => "Male".into(),
                Some(Sex::Other) => "Other".into(),
                None => UNKNOWN.into(),
            },
            Factor::Manufacturer => text(&study.manufacturer).map_or_else(|| UNKNOWN.into(), |m| manufacturer_name(&m)),
            Factor::Contrast => if text(&series.contrast_agent).is_some() { "With contrast" } else { "Without contrast" }.into(),
            Factor::SliceThickness => thickness_bucket(series.slice_thickness).into(),
            Factor::CtKernel => ct_kernel(series).into(),
            Factor::MriSequence => sequence_group(series).into(),
        })
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Factor {
    type Err = FactorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).map(|c| c.to_ascii_lowercase()).collect();
        match key.as_str() {
            "institution" => Ok(Factor::Institution),
            "age" => Ok(Factor::Age),
            "gender" | "sex" => Ok(Factor::Gender),
            "manufacturer" => Ok(Factor::Manufacturer),
            "contrast" => Ok(Factor::Contrast),
            "slicethickness" | "thickness" => Ok(Factor::SliceThickness),
            "ctkernel" | "kernel" => Ok(Factor::CtKernel),
            "mrisequence" | "sequence" => Ok(Factor::MriSequence),
            _ => Err(FactorError::UnknownFactor(s.to_string())),
        }
    }
}

const AGE_18_44: &str = "18 – 44 years";
const AGE_45_64: &str = "45 – 64 years";
const AGE_65: &str = "≥ 65 years";

fn age_bucket(age: Option<f64>) -> &'static str {
    match age {
        None => UNKNOWN,
        Some(a) if a < 18.0 => "< 18 years",
        Some(a) if a < 45.0 => AGE_18_44,
        Some(a) if a < 65.0 => AGE_45_64,
        Some(_) => AGE_65,
    }
}

const THIN: &str = "≤2 mm";
const MEDIUM: &str = ">2 mm and <5 mm";
const THICK: &str = "≥5 mm";

fn thickness_bucket(mm: Option<f64>) -> &'static str {
    match mm {
        None => UNKNOWN,
        Some(t) if t <= 2.0 => THIN,
        Some(t) if t < 5.0 => MEDIUM,
        Some(_) => THICK,
    }
}

fn manufacturer_name(raw: &str) -> String {
    let upper = raw.to_ascii_uppercase();
    const VENDORS: [(&str, &str); 7] = [
        ("SIEMENS", "Siemens"),
        ("PHILIPS", "Philips"),
        ("TOSHIBA", "Toshiba"),
        ("CANON", "Canon"),
        ("HITACHI", "Hitachi"),
        ("VITAL", "Vital Images"),
        ("GE", "GE"),
    ];
    VENDORS
        .iter()
        .find(|(key, _)| {
            if *key == "GE" {
                upper == "GE" || upper.starts_with("GE ") || upper.contains("GENERAL ELECTRIC") || upper.starts_with("GE_")
            } else {
                upper.contains(key)
            }
        })
        .map_or_else(|| raw.trim().to_string(), |(_, name)| name.to_string())
}

fn contains_word(haystack: &str, needle: &str) -> bool {
    let hay = haystack.as_bytes();
    let n = needle.len();
    haystack.match_indices(needle).any(|(i, _)| {
        let before = i == 0 || !hay[i - 1].is_ascii_alphanumeric();
        let after = i + n == hay.len() || !hay[i + n].is_ascii_alphanumeric();
        before && after
    })
}

fn series_text(series: &SeriesRecord) -> String {
    let mut text = series.series_description.clone().unwrap_or_default();
    for tag in &series.sequence_tags {
        text.push(' ');
        text.push_str(tag);
    }
    text.to_ascii_uppercase()
}

fn ct_kernel(series: &SeriesRecord) -> &'static str {
    let mut text = series_text(series);
    if let Some(k) = &series.convolution_kernel {
        text.push(' ');
        text.push_str(&k.to_ascii_uppercase());
    }
    if text.contains("BONE") {
        "Bone"
    } else {
        "Soft tissue"
    }
}

const SEQUENCE_GROUP_ORDER: &[&str] = &[
    "Image weighting",
    "Spin echo",
    "Gradient echo",
    "Inversion recovery",
    "MRA",
    "In and Out of Phase",
    "Diffusion",
];

/// Sequence keywords by group, in matching priority: technique-specific
/// groups before plain image weighting.
const SEQUENCE_KEYWORDS: &[(&str, &[&str])] = &[
    ("Diffusion", &["DIFFUSION", "DWI"]),
    ("In and Out of Phase", &["IN/OUT", "IN OF PHASE", "OUT OF PHASE", "IN PHASE", "OPP PHASE"]),
    ("MRA", &["TOF", "CONTRAST ENHANCED", "DELAY ENHANCED"]),
    ("Inversion recovery", &["IR", "STIR", "FLAIR"]),
    (
        "Gradient echo",
        &["GRE", "FFE", "FE", "SPGR", "FGRE", "LAVA", "VIBRANT", "VIBE", "BLISS", "FISP", "SSFP", "FIESTA", "TRU FISP", "TRUFISP"],
    ),
    ("Spin echo", &["SE", "FAST SE", "FSE", "SINGLE SHOT FSE", "SSFSE", "HASTE", "VISTA", "PROPELLER", "TSE"]),
    ("Image weighting", &["T1", "T2", "T1/T2*", "T2*", "PD", "SWI", "SWAN", "BRAVO", "MERGE"]),
];

/// Sequence group from the series description and sequence attributes.
pub fn sequence_group(series: &SeriesRecord) -> &'static str {
    let text = series_text(series);
    SEQUENCE_KEYWORDS
        .iter()
        .find(|(_, words)| words.iter().any(|w| contains_word(&text, w)))
        .map_or(UNKNOWN, |(group, _)| group)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FactorConfig {
    /// Categories with fewer members report "NA" and stay out of the test.
    pub min_count: usize,
}

impl Default for FactorConfig {
    fn default() -> Self {
        FactorConfig { min_count: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryRow {
    pub category: String,
    /// Studies, or series for series-level factors.
    pub n: usize,
    pub percent: f64,
    /// `None` below the minimum count or where undefined.
    pub sensitivity: Option<CIResult>,
    pub specificity: Option<CIResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorReport {
    pub factor: Factor,
    pub rows: Vec<CategoryRow>,
    /// Image-level correct/incorrect counts over the tested categories.
    pub table: FactorTable,
    /// Pearson test over categories meeting the minimum count; `None` with
    /// fewer than two such categories or a degenerate table.
    pub test: Option<ChiSquare>,
    pub cramers_v: Option<(f64, Association)>,
}

fn order_categories(factor: Factor, found: impl Iterator<Item = String>) -> Vec<String> {
    let found: HashSet<String> = found.collect();
    let preferred = factor.preferred_order();
    let mut out: Vec<String> = preferred.iter().filter(|c| found.contains(**c)).map(|c| c.to_string()).collect();
    let mut rest: Vec<String> = found
        .iter()
        .filter(|c| !preferred.contains(&c.as_str()) && c.as_str() != UNKNOWN)
        .cloned()
        .collect();
    rest.sort();
    out.extend(rest);
    if found.contains(UNKNOWN) {
        out.push(UNKNOWN.into());
    }
    out
}

/// Per-category sensitivity and specificity with bootstrap intervals, and
/// a chi-square test of accuracy against the factor.
pub fn factor_report(
    studies: &[StudyRecord],
    cohort: &EvalCohort,
    factor: Factor,
    config: &FactorConfig,
    bootstrap: &BootstrapConfig,
) -> Result<FactorReport, FactorError> {
    let mut meta: HashMap<&str, (&StudyRecord, &SeriesRecord)> = HashMap::new();
    for st in studies {
        for se in &st.series {
            meta.insert(se.series_uid.as_str(), (st, se));
        }
    }
    // series uid -> category
    let mut category_of: HashMap<&str, String> = HashMap::new();
    let mut members: BTreeMap<String, HashSet<&str>> = BTreeMap::new();
    for st in &cohort.studies {
        for se in &st.series {
            let Some((study, series)) = meta.get(se.series_uid.as_str()) else {
                continue;
            };
            let Some(cat) = factor.category(study, series) else {
                continue;
            };
            let unit = if factor.series_level() { se.series_uid.as_str() } else { st.study_uid.as_str() };
            members.entry(cat.clone()).or_default().insert(unit);
            category_of.insert(se.series_uid.as_str(), cat);
        }
    }
    let total: usize = members.values().map(HashSet::len).sum();
    let categories = order_categories(factor, members.keys().cloned());

    let mut rows = Vec::new();
    let mut table = FactorTable {
        factor: factor.label().to_string(),
        categories: Vec::new(),
        correct: Vec::new(),
        incorrect: Vec::new(),
    };
    for cat in categories {
        let n = members[&cat].len();
        let subset = cohort.select(|_, series| category_of.get(series) == Some(&cat));
        let (mut sensitivity, mut specificity) = (None, None);
        if n >= config.min_count {
            let metrics: [super::bootstrap::Metric; 2] = [&weighted_sensitivity_metric, &weighted_specificity_metric];
            let mut cis = bootstrap_many(&subset, &metrics, bootstrap)?.into_iter();
            sensitivity = cis.next().and_then(Result::ok);
            specificity = cis.next().and_then(Result::ok);
            let cm = subset.confusion();
            table.categories.push(cat.clone());
            table.correct.push(cm.trace());
            table.incorrect.push(cm.total() - cm.trace());
        }
        rows.push(CategoryRow {
            percent: if total > 0 { 100.0 * n as f64 / total as f64 } else { 0.0 },
            category: cat,
            n,
            sensitivity,
            specificity,
        });
    }
    let contingency = table.contingency();
    let test = chi_square(&contingency).ok();
    let cramers_v = super::chisq::cramers_v(&contingency).ok();
    Ok(FactorReport {
        factor,
        rows,
        table,
        test,
        cramers_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(desc: &str) -> SeriesRecord {
        let mut s = SeriesRecord::new("s", Modality::Mr);
        s.series_description = Some(desc.into());
        s
    }

    #[test]
    fn sequence_keywords() {
        assert_eq!(sequence_group(&series("AX T1 VIBE FS")), "Gradient echo");
        assert_eq!(sequence_group(&series("Sag T2 STIR")), "Inversion recovery");
        assert_eq!(sequence_group(&series("ax t2 haste")), "Spin echo");
        assert_eq!(sequence_group(&series("AX T1 IN/OUT")), "In and Out of Phase");
        assert_eq!(sequence_group(&series("ep2d_diff DWI")), "Diffusion");
        assert_eq!(sequence_group(&series("TOF 3D multi-slab")), "MRA");
        assert_eq!(sequence_group(&series("COR PD FATSAT")), "Image weighting");
        assert_eq!(sequence_group(&series("localizer")), UNKNOWN);
        // whole words only
        assert_eq!(sequence_group(&series("SAFE protocol")), UNKNOWN);
        let mut tagged = series("ax brain");
        tagged.sequence_tags.insert("IR".into());
        assert_eq!(sequence_group(&tagged), "Inversion recovery");
    }

    #[test]
    fn buckets() {
        assert_eq!(age_bucket(Some(44.9)), AGE_18_44);
        assert_eq!(age_bucket(Some(45.0)), AGE_45_64);
        assert_eq!(age_bucket(Some(65.0)), AGE_65);
        assert_eq!(thickness_bucket(Some(2.0)), THIN);
        assert_eq!(thickness_bucket(Some(4.99)), MEDIUM);
        assert_eq!(thickness_bucket(Some(5.0)), THICK);
        assert_eq!(manufacturer_name("SIEMENS Healthineers"), "Siemens");
        assert_eq!(manufacturer_name("GE MEDICAL SYSTEMS"), "GE");
        assert_eq!(manufacturer_name("Agfa"), "Agfa");
    }

    #[test]
    fn ct_kernel_from_description() {
        let mut s = SeriesRecord::new("s", Modality::Ct);
        s.series_description = Some("Chest 1.0 Bone".into());
        assert_eq!(ct_kernel(&s), "Bone");
        s.series_description = Some("Abd 5mm".into());
        assert_eq!(ct_kernel(&s), "Soft tissue");
        assert_eq!(Factor::CtKernel.category(&StudyRecord::new("x"), &series("T1")), None);
    }

    #[test]
    fn factor_names() {
        assert_eq!("slice thickness".parse::<Factor>().unwrap(), Factor::SliceThickness);
        assert!(matches!("weather".parse::<Factor>(), Err(FactorError::UnknownFactor(_))));
    }
}
