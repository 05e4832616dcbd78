//! Precomputed probability vectors read from CSV, usable as a backend.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::preprocess::NormalizedImage;

use super::backend::{Backend, ClassifyError};
use super::prediction::SUM_TOLERANCE;
use super::region::{BodyRegion, ClassSet};

#[derive(Debug, thiserror::Error)]
pub enum ScoresError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("score file line {line}: {message}")]
    SchemaError { line: usize, message: String },
    #[error("score file line {line}: probabilities sum to {sum}")]
    NotNormalized { line: usize, sum: f64 },
}

/// Probability vectors keyed by SOP instance UID.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    classes: ClassSet,
    rows: HashMap<String, Vec<f64>>,
}

impl ScoreTable {
    pub fn new(classes: ClassSet) -> Self {
        ScoreTable {
            classes,
            rows: HashMap::new(),
        }
    }

    pub fn classes(&self) -> &ClassSet {
        &self.classes
    }

    pub fn get(&self, sop_uid: &str) -> Option<&[f64]> {
        self.rows.get(sop_uid).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Inserts a row; returns false (and keeps the old row) if the UID exists.
    pub fn insert(&mut self, sop_uid: String, probabilities: Vec<f64>) -> bool {
        assert_eq!(probabilities.len(), self.classes.len(), "row width must match class count");
        if self.rows.contains_key(&sop_uid) {
            return false;
        }
        self.rows.insert(sop_uid, probabilities);
        true
    }

    /// Rows sorted by UID.
    pub fn sorted_rows(&self) -> Vec<(&str, &[f64])> {
        let mut rows: Vec<(&str, &[f64])> = self.rows.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        rows
    }
}

/// Reads `sop_uid,<class names in canonical order>` CSV.
///
/// Rows summing to 1 within 1e-6 are renormalized; other sums are
/// `NotNormalized`. Duplicate UIDs, malformed numbers and negative values are
/// schema errors.
pub fn load_scores<R: Read>(input: R) -> Result<ScoreTable, ScoresError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(input);
    let mut records = reader.records();
    let schema = |line: usize, message: String| ScoresError::SchemaError { line, message };
    let csv_err = |line: usize, e: csv::Error| schema(line, e.to_string());

    let header = records
        .next()
        .ok_or_else(|| schema(1, "empty file".into()))?
        .map_err(|e| csv_err(1, e))?;
    if header.get(0) != Some("sop_uid") {
        return Err(schema(1, "first column must be sop_uid".into()));
    }
    let regions: Vec<BodyRegion> = header
        .iter()
        .skip(1)
        .map(|name| name.parse::<BodyRegion>().map_err(|e| schema(1, e.to_string())))
        .collect::<Result<_, _>>()?;
    let classes = ClassSet::new(regions).map_err(|e| schema(1, e.to_string()))?;
    let mut table = ScoreTable::new(classes);

    for (i, record) in records.enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| csv_err(line, e))?;
        if record.len() != table.classes.len() + 1 {
            return Err(schema(line, format!("expected {} fields, found {}", table.classes.len() + 1, record.len())));
        }
        let uid = record.get(0).unwrap_or_default().to_string();
        if uid.is_empty() {
            return Err(schema(line, "empty sop_uid".into()));
        }
        let values: Vec<f64> = record
            .iter()
            .skip(1)
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
                _ => Err(schema(line, format!("invalid probability {f:?}"))),
            })
            .collect::<Result<_, _>>()?;
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(ScoresError::NotNormalized { line, sum });
        }
        let normalized = values.into_iter().map(|v| v / sum).collect();
        if !table.insert(uid.clone(), normalized) {
            return Err(schema(line, format!("duplicate sop_uid {uid}")));
        }
    }
    Ok(table)
}

/// Writes the table in the format read by [`load_scores`], rows sorted by UID.
pub fn write_scores<W: Write>(table: &ScoreTable, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sop_uid".to_string()];
    header.extend(table.classes.names());
    w.write_record(&header)?;
    for (uid, values) in table.sorted_rows() {
        let mut row = vec![uid.to_string()];
        row.extend(values.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

impl Backend for ScoreTable {
    fn classes(&self) -> &ClassSet {
        &self.classes
    }

    fn needs_pixels(&self) -> bool {
        false
    }

    fn classify_batch(&self, images: &[NormalizedImage]) -> Result<Vec<Vec<f64>>, ClassifyError> {
        images
            .iter()
            .map(|im| {
                self.get(&im.source_sop_uid)
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| ClassifyError::BackendFailure(format!("no scores for {}", im.source_sop_uid)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::backend::classify_image;
    use ndarray::Array2;

    fn lookup(uid: &str) -> NormalizedImage {
        NormalizedImage {
            values: Array2::zeros((0, 0)),
            source_sop_uid: uid.into(),
            original_shape: (0, 0),
        }
    }

    #[test]
    fn reads_rows() {
        let csv = "sop_uid,Abdomen,Chest,Knee\nuid1,0.5,0.5,0\nuid2,0.9,0.1,0\n";
        let t = load_scores(csv.as_bytes()).unwrap();
        assert_eq!(t.get("uid1").unwrap(), &[0.5, 0.5, 0.0]);
        let p = classify_image(&lookup("uid2"), &t).unwrap();
        assert_eq!(p.label, BodyRegion::Abdomen);
        assert!((p.margin - 0.8).abs() < 1e-12);
        assert!(matches!(classify_image(&lookup("nope"), &t), Err(ClassifyError::BackendFailure(_))));
    }

    #[test]
    fn row_sum_checked() {
        let csv = "sop_uid,Abdomen,Chest\nuid1,0.4,0.4\n";
        assert!(matches!(load_scores(csv.as_bytes()), Err(ScoresError::NotNormalized { line: 2, .. })));
    }

    #[test]
    fn duplicate_uid_rejected() {
        let csv = "sop_uid,Abdomen,Chest\nuid1,1,0\nuid1,0,1\n";
        assert!(matches!(load_scores(csv.as_bytes()), Err(ScoresError::SchemaError { line: 3, .. })));
    }

    #[test]
    fn header_must_be_canonical() {
        let csv = "sop_uid,Chest,Abdomen\nuid1,1,0\n";
        assert!(matches!(load_scores(csv.as_bytes()), Err(ScoresError::SchemaError { line: 1, .. })));
        let csv = "uid,Abdomen\n";
        assert!(matches!(load_scores(csv.as_bytes()), Err(ScoresError::SchemaError { line: 1, .. })));
    }

    #[test]
    fn round_trip() {
        let mut t = ScoreTable::new(ClassSet::new(vec![BodyRegion::Head, BodyRegion::Neck]).unwrap());
        t.insert("b".into(), vec![0.1 + 0.2, 1.0 - (0.1 + 0.2)]);
        t.insert("a".into(), vec![1.0, 0.0]);
        let mut buf = Vec::new();
        write_scores(&t, &mut buf).unwrap();
        assert_eq!(load_scores(buf.as_slice()).unwrap(), t);
    }
}
