//! Flat one-line-per-image metadata sidecar.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::classify::Modality;

use super::records::{ImageRecord, SeriesRecord, Sex, StudyRecord};

#[derive(Debug, thiserror::Error)]
pub enum NdjsonError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema error on line {line}: {message}")]
    SchemaError { line: usize, message: String },
}

/// One image with its series and study attributes repeated inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageLine {
    pub study_uid: String,
    #[serde(default)]
    pub patient_id: Option<String>,
    #[serde(default)]
    pub patient_age: Option<f64>,
    #[serde(default)]
    pub patient_sex: Option<Sex>,
    #[serde(default)]
    pub manufacturer: Option<String>,
    #[serde(default)]
    pub institution: Option<String>,
    #[serde(default)]
    pub body_part_examined: Option<String>,
    #[serde(default)]
    pub procedure_description: Option<String>,

    pub series_uid: String,
    #[serde(default = "unknown_modality")]
    pub modality: Modality,
    #[serde(default)]
    pub series_description: Option<String>,
    #[serde(default)]
    pub frame_of_reference_uid: Option<String>,
    #[serde(default)]
    pub slice_thickness: Option<f64>,
    #[serde(default)]
    pub convolution_kernel: Option<String>,
    #[serde(default)]
    pub contrast_agent: Option<String>,
    #[serde(default)]
    pub sequence_tags: BTreeSet<String>,

    pub sop_uid: String,
    #[serde(default)]
    pub sop_class_uid: Option<String>,
    #[serde(default)]
    pub rows: Option<u16>,
    #[serde(default)]
    pub cols: Option<u16>,
    #[serde(default)]
    pub bits_allocated: Option<u16>,
    #[serde(default)]
    pub bits_stored: Option<u16>,
    #[serde(default)]
    pub samples_per_pixel: Option<u16>,
    #[serde(default)]
    pub pixel_representation: Option<u16>,
    #[serde(default)]
    pub transfer_syntax_uid: String,
    #[serde(default)]
    pub image_position_patient: Option<[f64; 3]>,
    #[serde(default)]
    pub image_orientation_patient: Option<[f64; 6]>,
    #[serde(default)]
    pub instance_number: Option<i32>,
    #[serde(default)]
    pub has_pixel_data: bool,
    #[serde(default)]
    pub source_path: Option<String>,
}

fn unknown_modality() -> Modality {
    Modality::Other(String::new())
}

impl ImageLine {
    fn from_records(study: &StudyRecord, series: &SeriesRecord, image: &ImageRecord) -> Self {
        ImageLine {
            study_uid: study.study_uid.clone(),
            patient_id: study.patient_id.clone(),
            patient_age: study.patient_age,
            patient_sex: study.patient_sex,
            manufacturer: study.manufacturer.clone(),
            institution: study.institution.clone(),
            body_part_examined: study.body_part_examined.clone(),
            procedure_description: study.procedure_description.clone(),
            series_uid: series.series_uid.clone(),
            modality: series.modality.clone(),
            series_description: series.series_description.clone(),
            frame_of_reference_uid: series.frame_of_reference_uid.clone(),
            slice_thickness: series.slice_thickness,
            convolution_kernel: series.convolution_kernel.clone(),
            contrast_agent: series.contrast_agent.clone(),
            sequence_tags: series.sequence_tags.clone(),
            sop_uid: image.sop_uid.clone(),
            sop_class_uid: image.sop_class_uid.clone(),
            rows: image.rows,
            cols: image.cols,
            bits_allocated: image.bits_allocated,
            bits_stored: image.bits_stored,
            samples_per_pixel: image.samples_per_pixel,
            pixel_representation: image.pixel_representation,
            transfer_syntax_uid: image.transfer_syntax_uid.clone(),
            image_position_patient: image.image_position_patient,
            image_orientation_patient: image.image_orientation_patient,
            instance_number: image.instance_number,
            has_pixel_data: image.has_pixel_data,
            source_path: image.source_path.clone(),
        }
    }

    fn study(&self) -> StudyRecord {
        let mut s = StudyRecord::new(self.study_uid.clone());
        s.patient_id = self.patient_id.clone();
        s.patient_age = self.patient_age;
        s.patient_sex = self.patient_sex;
        s.manufacturer = self.manufacturer.clone();
        s.institution = self.institution.clone();
        s.body_part_examined = self.body_part_examined.clone();
        s.procedure_description = self.procedure_description.clone();
        s
    }

    fn series(&self) -> SeriesRecord {
        let mut s = SeriesRecord::new(self.series_uid.clone(), self.modality.clone());
        s.series_description = self.series_description.clone();
        s.frame_of_reference_uid = self.frame_of_reference_uid.clone();
        s.slice_thickness = self.slice_thickness;
        s.convolution_kernel = self.convolution_kernel.clone();
        s.contrast_agent = self.contrast_agent.clone();
        s.sequence_tags = self.sequence_tags.clone();
        s
    }

    fn into_image(self) -> ImageRecord {
        ImageRecord {
            sop_uid: self.sop_uid,
            sop_class_uid: self.sop_class_uid,
            rows: self.rows,
            cols: self.cols,
            bits_allocated: self.bits_allocated,
            bits_stored: self.bits_stored,
            samples_per_pixel: self.samples_per_pixel,
            pixel_representation: self.pixel_representation,
            transfer_syntax_uid: self.transfer_syntax_uid,
            image_position_patient: self.image_position_patient,
            image_orientation_patient: self.image_orientation_patient,
            instance_number: self.instance_number,
            has_pixel_data: self.has_pixel_data,
            source_path: self.source_path,
            pixels: None,
        }
    }
}

/// Writes one line per image, in cohort order.
pub fn write_metadata_ndjson<W: Write>(studies: &[StudyRecord], mut out: W) -> Result<(), NdjsonError> {
    for study in studies {
        for series in &study.series {
            for image in &series.images {
                let line = ImageLine::from_records(study, series, image);
                serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads the sidecar into the study/series/image hierarchy.
///
/// Studies and series are ordered by UID; images keep line order. The first
/// line of a study or series supplies its attributes. Blank lines are
/// ignored.
pub fn read_metadata_ndjson<R: BufRead>(input: R) -> Result<Vec<StudyRecord>, NdjsonError> {
    let mut studies: BTreeMap<String, (StudyRecord, BTreeMap<String, SeriesRecord>)> = BTreeMap::new();
    let mut seen_sops = BTreeSet::new();
    for (index, line) in input.lines().enumerate() {
        let line_no = index + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| NdjsonError::SchemaError { line: line_no, message };
        let record: ImageLine = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        for (name, value) in [
            ("study_uid", &record.study_uid),
            ("series_uid", &record.series_uid),
            ("sop_uid", &record.sop_uid),
        ] {
            if value.trim().is_empty() {
                return Err(schema(format!("empty {name}")));
            }
        }
        let key = (record.study_uid.clone(), record.series_uid.clone(), record.sop_uid.clone());
        if !seen_sops.insert(key) {
            return Err(schema(format!("duplicate sop_uid {}", record.sop_uid)));
        }
        let (_, series_map) = studies
            .entry(record.study_uid.clone())
            .or_insert_with(|| (record.study(), BTreeMap::new()));
        series_map
            .entry(record.series_uid.clone())
            .or_insert_with(|| record.series())
            .images
            .push(record.into_image());
    }
    Ok(studies
        .into_values()
        .map(|(mut study, series)| {
            study.series = series.into_values().collect();
            study
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_line_one_image() {
        let text = r#"{"study_uid":"1","series_uid":"1.1","sop_uid":"1.1.1","modality":"MR","rows":256}"#;
        let studies = read_metadata_ndjson(text.as_bytes()).unwrap();
        assert_eq!(studies.len(), 1);
        assert_eq!(studies[0].series[0].modality, Modality::Mr);
        assert_eq!(studies[0].series[0].images[0].rows, Some(256));
        assert_eq!(studies[0].series[0].images[0].cols, None);
    }

    #[test]
    fn missing_sop_uid_names_line() {
        let text = "\n{\"study_uid\":\"1\",\"series_uid\":\"1.1\",\"sop_uid\":\"a\"}\n{\"study_uid\":\"1\",\"series_uid\":\"1.1\"}\n";
        match read_metadata_ndjson(text.as_bytes()) {
            Err(NdjsonError::SchemaError { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("sop_uid"), "{message}");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let text = r#"{"study_uid":"1","series_uid":"1.1","sop_uid":"a","colour":"red"}"#;
        assert!(matches!(
            read_metadata_ndjson(text.as_bytes()),
            Err(NdjsonError::SchemaError { line: 1, .. })
        ));
    }

    #[test]
    fn round_trip() {
        let mut study = StudyRecord::new("9");
        study.patient_age = Some(7.0 / 12.0);
        study.patient_sex = Some(Sex::Female);
        let mut series = SeriesRecord::new("9.1", Modality::Other("PT".into()));
        series.sequence_tags.insert("SE".into());
        series.slice_thickness = Some(0.1 + 0.2);
        let mut image = ImageRecord::new("9.1.1".into(), "1.2.840.10008.1.2".into());
        image.image_orientation_patient = Some([1.0, 0.0, 0.0, 0.0, 0.8, 0.6]);
        series.images.push(image);
        study.series.push(series);
        let mut buf = Vec::new();
        write_metadata_ndjson(std::slice::from_ref(&study), &mut buf).unwrap();
        assert_eq!(read_metadata_ndjson(buf.as_slice()).unwrap(), vec![study]);
    }
}
