//! Small CSV contracts shared by the subcommands.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::classify::BodyRegion;
use crate::cohort::PartitionAssignment;

#[derive(Debug, thiserror::Error)]
pub enum CsvFileError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("line {line}: unknown region {value:?}")]
    Region { line: u64, value: String },
    #[error("line {line}: SOP instance {sop_uid} listed twice")]
    Duplicate { line: u64, sop_uid: String },
}

/// Writes `sop_uid,region` rows.
pub fn write_truth_csv<W: Write>(rows: &[(String, BodyRegion)], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sop_uid", "region"])?;
    for (sop, region) in rows {
        w.write_record([sop.as_str(), region.name()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth_csv<R: Read>(input: R) -> Result<HashMap<String, BodyRegion>, CsvFileError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = HashMap::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let (sop, value) = (rec.get(0).unwrap_or(""), rec.get(1).unwrap_or(""));
        let region = value.parse::<BodyRegion>().map_err(|_| CsvFileError::Region {
            line,
            value: value.to_string(),
        })?;
        if out.insert(sop.to_string(), region).is_some() {
            return Err(CsvFileError::Duplicate {
                line,
                sop_uid: sop.to_string(),
            });
        }
    }
    Ok(out)
}

/// Writes `study_uid,split,region` rows.
pub fn write_split_csv<W: Write>(rows: &[PartitionAssignment], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
