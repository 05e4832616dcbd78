//! Writes predicted regions back to (0018,0015) BodyPartExamined.
//!
//! Only the one element changes: its bytes are replaced, or a new element is
//! inserted at its sorted position. Files are rewritten through a temporary
//! file in the same directory and renamed over the original.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::ingest::dicom::tags;
use crate::ingest::tree::{read_dicom_file, FileError};
use crate::ingest::writer::{encode_element, Value};
use crate::ingest::StudyRecord;
use crate::postprocess::{SeriesOutcome, SeriesStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TagAction {
    Written,
    /// Would be written; dry run.
    Planned,
    Unchanged,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TagChange {
    pub path: String,
    pub series_uid: String,
    pub old: Option<String>,
    pub new: Option<String>,
    pub action: TagAction,
    pub reason: String,
}

#[derive(Debug, thiserror::Error)]
pub enum TagWriteError {
    #[error(transparent)]
    File(#[from] FileError),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// The file's bytes with BodyPartExamined set to `term`, and the old value.
pub fn rewrite_body_part(path: &Path, term: &str) -> Result<(Vec<u8>, Option<String>), FileError> {
    let (bytes, parsed) = read_dicom_file(path)?;
    let layout = parsed.layout;
    let element = encode_element(tags::BODY_PART_EXAMINED, &Value::cs(term), layout.encoding);
    let range = layout.body_part_span.unwrap_or(layout.body_part_insert_at..layout.body_part_insert_at);
    let mut out = Vec::with_capacity(bytes.len() + element.len());
    out.extend_from_slice(&bytes[..range.start]);
    out.extend_from_slice(&element);
    out.extend_from_slice(&bytes[range.end..]);
    Ok((out, parsed.study.body_part_examined))
}

fn replace_file(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Sets BodyPartExamined on every image of every accepted series to the
/// defined term of the series' predominant label.
///
/// Series that were rejected or have no result are logged as skipped.
/// Unreadable files are logged as failed and do not stop the run.
pub fn write_body_part_tags(studies: &[StudyRecord], outcomes: &[SeriesOutcome], dry_run: bool) -> Vec<TagChange> {
    let by_series: HashMap<&str, &SeriesOutcome> = outcomes.iter().map(|o| (o.series_uid.as_str(), o)).collect();
    let mut log = Vec::new();
    for study in studies {
        for series in &study.series {
            let target = match by_series.get(series.series_uid.as_str()) {
                None => Err("no classification result"),
                Some(o) if o.status == SeriesStatus::RejectedUncertain => Err("series rejected as uncertain"),
                Some(o) => o.predominant_label().ok_or("series has no final labels"),
            };
            for image in &series.images {
                let path = image.source_path.clone().unwrap_or_default();
                let mut change = TagChange {
                    path: path.clone(),
                    series_uid: series.series_uid.clone(),
                    old: study.body_part_examined.clone(),
                    new: None,
                    action: TagAction::Skipped,
                    reason: String::new(),
                };
                let region = match target {
                    Ok(r) => r,
                    Err(reason) => {
                        change.reason = reason.into();
                        log.push(change);
                        continue;
                    }
                };
                if path.is_empty() {
                    change.reason = "image has no source file".into();
                    log.push(change);
                    continue;
                }
                let term = region.dicom_body_part();
                change.new = Some(term.to_string());
                match rewrite_body_part(Path::new(&path), term) {
                    Err(e) => {
                        change.action = TagAction::Failed;
                        change.reason = e.to_string();
                    }
                    Ok((bytes, old)) => {
                        change.action = if old.as_deref() == Some(term) {
                            TagAction::Unchanged
                        } else if dry_run {
                            TagAction::Planned
                        } else {
                            match replace_file(Path::new(&path), &bytes) {
                                Ok(()) => TagAction::Written,
                                Err(e) => {
                                    change.reason = e.to_string();
                                    TagAction::Failed
                                }
                            }
                        };
                        change.old = old;
                    }
                }
                log.push(change);
            }
        }
    }
    log
}

pub fn write_change_log<W: Write>(log: &[TagChange], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path", "series_uid", "old", "new", "action", "reason"])?;
    for c in log {
        let action = match c.action {
            TagAction::Written => "written",
            TagAction::Planned => "planned",
            TagAction::Unchanged => "unchanged",
            TagAction::Skipped => "skipped",
            TagAction::Failed => "failed",
        };
        w.write_record([
            c.path.as_str(),
            &c.series_uid,
            c.old.as_deref().unwrap_or(""),
            c.new.as_deref().unwrap_or(""),
            action,
            &c.reason,
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::dicom::parse_dicom;
    use crate::ingest::writer::DicomWriter;

    fn file(dir: &Path, body_part: Option<&str>, implicit: bool) -> PathBuf {
        let mut w = if implicit { DicomWriter::implicit_le("1.2.3.4") } else { DicomWriter::explicit_le("1.2.3.4") };
        w.put(tags::MODALITY, Value::cs("CT"))
            .put(tags::STUDY_INSTANCE_UID, Value::ui("1.2"))
            .put(tags::SERIES_INSTANCE_UID, Value::ui("1.2.3"))
            .put(tags::SLICE_THICKNESS, Value::ds(&[2.5]))
            .put(tags::ROWS, Value::Us(2))
            .put(tags::COLUMNS, Value::Us(2))
            .put_native_pixels(vec![1, 0, 2, 0, 3, 0, 4, 0]);
        if let Some(bp) = body_part {
            w.put(tags::BODY_PART_EXAMINED, Value::cs(bp));
        }
        let path = dir.join(format!("{}_{}.dcm", body_part.unwrap_or("none"), implicit));
        std::fs::write(&path, w.to_part10()).unwrap();
        path
    }

    #[test]
    fn replace_and_insert_keep_other_attributes() {
        let dir = tempfile::tempdir().unwrap();
        for (bp, implicit) in [(Some("CHEST"), false), (None, false), (Some("ABDOMEN"), true), (None, true)] {
            let path = file(dir.path(), bp, implicit);
            let before = parse_dicom(&std::fs::read(&path).unwrap()).unwrap();
            let (bytes, old) = rewrite_body_part(&path, "KNEE").unwrap();
            assert_eq!(old.as_deref(), bp);
            let after = parse_dicom(&bytes).unwrap();
            assert_eq!(after.study.body_part_examined.as_deref(), Some("KNEE"));
            assert_eq!(after.image, before.image);
            assert_eq!(after.series, before.series);
            let mut study = after.study.clone();
            study.body_part_examined = before.study.body_part_examined.clone();
            assert_eq!(study, before.study);
        }
    }
}
