//! Study / series / image metadata hierarchy.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::classify::Modality;

/// Decoded pixel samples, rows × cols, after bit masking and sign extension.
pub type PixelMatrix = Array2<i64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    #[serde(rename = "M")]
    Male,
    #[serde(rename = "F")]
    Female,
    #[serde(rename = "O")]
    Other,
}

impl Sex {
    pub fn from_code(code: &str) -> Option<Sex> {
        match code.trim().to_ascii_uppercase().as_str() {
            "M" => Some(Sex::Male),
            "F" => Some(Sex::Female),
            "O" => Some(Sex::Other),
            _ => None,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Sex::Male => "M",
            Sex::Female => "F",
            Sex::Other => "O",
        }
    }
}

/// One image instance.
///
/// Image attributes that are absent from the source stay `None`; pixel
/// samples are decoded on demand and never serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub sop_uid: String,
    pub sop_class_uid: Option<String>,
    pub rows: Option<u16>,
    pub cols: Option<u16>,
    pub bits_allocated: Option<u16>,
    pub bits_stored: Option<u16>,
    pub samples_per_pixel: Option<u16>,
    pub pixel_representation: Option<u16>,
    pub transfer_syntax_uid: String,
    pub image_position_patient: Option<[f64; 3]>,
    pub image_orientation_patient: Option<[f64; 6]>,
    pub instance_number: Option<i32>,
    pub has_pixel_data: bool,
    pub source_path: Option<String>,
    #[serde(skip)]
    pub pixels: Option<PixelMatrix>,
}

impl ImageRecord {
    pub fn new(sop_uid: String, transfer_syntax_uid: String) -> Self {
        ImageRecord {
            sop_uid,
            sop_class_uid: None,
            rows: None,
            cols: None,
            bits_allocated: None,
            bits_stored: None,
            samples_per_pixel: None,
            pixel_representation: None,
            transfer_syntax_uid,
            image_position_patient: None,
            image_orientation_patient: None,
            instance_number: None,
            has_pixel_data: false,
            source_path: None,
            pixels: None,
        }
    }

    pub fn pixel_count(&self) -> Option<usize> {
        Some(usize::from(self.rows?) * usize::from(self.cols?))
    }

    /// Bits stored, falling back to bits allocated when the former is absent.
    pub fn effective_bits_stored(&self) -> Option<u16> {
        self.bits_stored.or(self.bits_allocated)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub series_uid: String,
    pub modality: Modality,
    pub series_description: Option<String>,
    pub frame_of_reference_uid: Option<String>,
    pub slice_thickness: Option<f64>,
    pub convolution_kernel: Option<String>,
    pub contrast_agent: Option<String>,
    pub sequence_tags: BTreeSet<String>,
    pub images: Vec<ImageRecord>,
}

impl SeriesRecord {
    pub fn new(series_uid: impl Into<String>, modality: Modality) -> Self {
        SeriesRecord {
            series_uid: series_uid.into(),
            modality,
            series_description: None,
            frame_of_reference_uid: None,
            slice_thickness: None,
            convolution_kernel: None,
            contrast_agent: None,
            sequence_tags: BTreeSet::new(),
            images: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_uid: String,
    pub patient_id: Option<String>,
    pub patient_age: Option<f64>,
    pub patient_sex: Option<Sex>,
    pub manufacturer: Option<String>,
    pub institution: Option<String>,
    pub body_part_examined: Option<String>,
    pub procedure_description: Option<String>,
    pub series: Vec<SeriesRecord>,
}

impl StudyRecord {
    pub fn new(study_uid: impl Into<String>) -> Self {
        StudyRecord {
            study_uid: study_uid.into(),
            patient_id: None,
            patient_age: None,
            patient_sex: None,
            manufacturer: None,
            institution: None,
            body_part_examined: None,
            procedure_description: None,
            series: Vec::new(),
        }
    }

    pub fn image_count(&self) -> usize {
        self.series.iter().map(|s| s.images.len()).sum()
    }

    pub fn images(&self) -> impl Iterator<Item = (&SeriesRecord, &ImageRecord)> {
        self.series
            .iter()
            .flat_map(|s| s.images.iter().map(move |i| (s, i)))
    }
}

/// Returns a copy of the cohort with every decoded pixel matrix dropped.
pub fn strip_pixels(studies: &[StudyRecord]) -> Vec<StudyRecord> {
    let mut out = studies.to_vec();
    for study in &mut out {
        for series in &mut study.series {
            for image in &mut series.images {
                image.pixels = None;
            }
        }
    }
    out
}
