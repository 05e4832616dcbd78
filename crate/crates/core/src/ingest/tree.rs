//! Directory ingestion: parse every file under a root and group the results
//! into studies and series.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use walkdir::WalkDir;

use crate::classify::Modality;
use crate::geometry;

use super::dicom::{parse_dicom, DicomError, ParsedDicom};
use super::pixels::{decode_pixels, DecodeError};
use super::records::{ImageRecord, PixelMatrix, SeriesRecord, StudyRecord};

#[derive(Debug, thiserror::Error)]
pub enum FileError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dicom(#[from] DicomError),
    #[error("missing {0}")]
    MissingUid(&'static str),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("image has no pixel data")]
    NoPixelData,
    #[error("image has no source file")]
    NoSource,
}

#[derive(Debug)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub error: FileError,
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub studies: Vec<StudyRecord>,
    pub skipped: Vec<SkippedFile>,
}

/// Reads and parses one file.
pub fn read_dicom_file(path: &Path) -> Result<(Vec<u8>, ParsedDicom), FileError> {
    let bytes = std::fs::read(path)?;
    let parsed = parse_dicom(&bytes)?;
    Ok((bytes, parsed))
}

/// Decodes the pixels of an ingested image by re-reading its source file.
pub fn load_pixels(image: &ImageRecord) -> Result<PixelMatrix, FileError> {
    let path = image.source_path.as_deref().ok_or(FileError::NoSource)?;
    let (bytes, parsed) = read_dicom_file(Path::new(path))?;
    let location = parsed.pixel_data.ok_or(FileError::NoPixelData)?;
    Ok(decode_pixels(&parsed.image, &location.payload(&bytes))?)
}

fn collect_files(root: &Path) -> (Vec<PathBuf>, Vec<SkippedFile>) {
    let mut files = Vec::new();
    let mut skipped = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        match entry {
            Ok(e) if e.file_type().is_file() => files.push(e.into_path()),
            Ok(_) => {}
            Err(err) => {
                let path = err.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf());
                let io = err
                    .into_io_error()
                    .unwrap_or_else(|| std::io::Error::other("directory walk failed"));
                skipped.push(SkippedFile {
                    path,
                    error: FileError::Io(io),
                });
            }
        }
    }
    (files, skipped)
}

/// Ingests every file below `root`.
///
/// Files are parsed in parallel; grouping is a deterministic reduction over
/// the path-sorted file list, so the result does not depend on scheduling.
/// Unreadable or unparseable files land in the skip report.
pub fn ingest_tree(root: &Path) -> IngestReport {
    let (files, mut skipped) = collect_files(root);
    let parsed: Vec<(PathBuf, Result<ParsedDicom, FileError>)> = files
        .into_par_iter()
        .map(|path| {
            let result = read_dicom_file(&path).and_then(|(_, p)| {
                if p.image.sop_uid.is_empty() {
                    return Err(FileError::MissingUid("SOPInstanceUID"));
                }
                if p.study.study_uid.is_none() {
                    return Err(FileError::MissingUid("StudyInstanceUID"));
                }
                if p.series.series_uid.is_none() {
                    return Err(FileError::MissingUid("SeriesInstanceUID"));
                }
                Ok(p)
            });
            (path, result)
        })
        .collect();

    let mut good = Vec::new();
    for (path, result) in parsed {
        match result {
            Ok(mut p) => {
                p.image.source_path = Some(path.display().to_string());
                good.push(p);
            }
            Err(error) => skipped.push(SkippedFile { path, error }),
        }
    }
    IngestReport {
        studies: group_records(good),
        skipped,
    }
}

/// Groups parsed files into studies and series. The first file seen supplies
/// study and series attributes; studies and series are sorted by UID.
pub fn group_records(files: Vec<ParsedDicom>) -> Vec<StudyRecord> {
    let mut studies: BTreeMap<String, (StudyRecord, BTreeMap<String, SeriesRecord>)> = BTreeMap::new();
    for p in files {
        let study_uid = p.study.study_uid.clone().unwrap_or_default();
        let series_uid = p.series.series_uid.clone().unwrap_or_default();
        let (_, series_map) = studies.entry(study_uid.clone()).or_insert_with(|| {
            let a = &p.study;
            let mut s = StudyRecord::new(study_uid);
            s.patient_id = a.patient_id.clone();
            s.patient_age = a.patient_age;
            s.patient_sex = a.patient_sex;
            s.manufacturer = a.manufacturer.clone();
            s.institution = a.institution.clone();
            s.body_part_examined = a.body_part_examined.clone();
            s.procedure_description = a.procedure_description.clone();
            (s, BTreeMap::new())
        });
        let series = series_map.entry(series_uid.clone()).or_insert_with(|| {
            let a = &p.series;
            let modality = a.modality.clone().unwrap_or_else(|| Modality::Other(String::new()));
            let mut s = SeriesRecord::new(series_uid, modality);
            s.series_description = a.series_description.clone();
            s.frame_of_reference_uid = a.frame_of_reference_uid.clone();
            s.slice_thickness = a.slice_thickness;
            s.convolution_kernel = a.convolution_kernel.clone();
            s.contrast_agent = a.contrast_agent.clone();
            s.sequence_tags = a.sequence_tags.clone();
            s
        });
        series.images.push(p.image);
    }
    studies
        .into_values()
        .map(|(mut study, series)| {
            study.series = series
                .into_values()
                .map(|mut s| {
                    order_images(&mut s);
                    s
                })
                .collect();
            study
        })
        .collect()
}

/// Sorts images by position along the slice normal when every image has a
/// position, else by InstanceNumber when every image has one, else keeps
/// file order. Sorting is stable, so ties keep file order.
pub fn order_images(series: &mut SeriesRecord) {
    let all_positioned = series.images.iter().all(|i| i.image_position_patient.is_some());
    if all_positioned {
        let normal = series
            .images
            .iter()
            .find_map(|i| i.image_orientation_patient)
            .and_then(|o| geometry::slice_normal(&o).ok())
            .unwrap_or([0.0, 0.0, 1.0]);
        let key = |im: &ImageRecord| {
            let p = im.image_position_patient.expect("checked above");
            p[0] * normal[0] + p[1] * normal[1] + p[2] * normal[2]
        };
        series.images.sort_by(|a, b| key(a).total_cmp(&key(b)));
    } else if series.images.iter().all(|i| i.instance_number.is_some()) {
        series.images.sort_by_key(|i| i.instance_number);
    }
}
