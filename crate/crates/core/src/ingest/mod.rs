//! DICOM and metadata-sidecar ingestion into the study/series/image hierarchy.

pub mod dicom;
pub mod ndjson;
pub mod pixels;
pub mod records;
pub mod tree;
pub mod writer;

pub use dicom::{parse_dicom, DicomError, ParsedDicom};
pub use ndjson::{read_metadata_ndjson, write_metadata_ndjson, NdjsonError};
pub use pixels::{decode_pixels, DecodeError};
pub use records::{ImageRecord, PixelMatrix, SeriesRecord, Sex, StudyRecord};
pub use tree::{ingest_tree, load_pixels, FileError, IngestReport, SkippedFile};
