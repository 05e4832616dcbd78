//! Little-endian DICOM dataset reader.
//!
//! Reads Part-10 files (preamble + `DICM` + explicit VR file meta group) and
//! bare little-endian datasets. Only the attributes the pipeline consumes are
//! decoded; everything else, including sequences, is skipped by length. Every
//! length is checked against the input before use, so arbitrary bytes yield
//! either a record or a [`DicomError`], and allocations stay bounded by the
//! input size.

use std::collections::BTreeSet;
use std::ops::Range;

use crate::classify::Modality;

use super::records::{ImageRecord, Sex};

/// Transfer syntax UIDs recognised by the reader.
pub mod ts {
    pub const IMPLICIT_VR_LE: &str = "1.2.840.10008.1.2";
    pub const EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1";
    pub const DEFLATED_EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1.99";
    pub const EXPLICIT_VR_BE: &str = "1.2.840.10008.1.2.2";
    pub const RLE_LOSSLESS: &str = "1.2.840.10008.1.2.5";
    pub const JPEG_LOSSLESS: &str = "1.2.840.10008.1.2.4.57";
    pub const JPEG_LOSSLESS_SV1: &str = "1.2.840.10008.1.2.4.70";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag(pub u16, pub u16);

impl std::fmt::Display for Tag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({:04X},{:04X})", self.0, self.1)
    }
}

pub mod tags {
    use super::Tag;

    pub const TRANSFER_SYNTAX_UID: Tag = Tag(0x0002, 0x0010);
    pub const SOP_CLASS_UID: Tag = Tag(0x0008, 0x0016);
    pub const SOP_INSTANCE_UID: Tag = Tag(0x0008, 0x0018);
    pub const MODALITY: Tag = Tag(0x0008, 0x0060);
    pub const MANUFACTURER: Tag = Tag(0x0008, 0x0070);
    pub const INSTITUTION_NAME: Tag = Tag(0x0008, 0x0080);
    pub const STUDY_DESCRIPTION: Tag = Tag(0x0008, 0x1030);
    pub const SERIES_DESCRIPTION: Tag = Tag(0x0008, 0x103E);
    pub const PATIENT_ID: Tag = Tag(0x0010, 0x0020);
    pub const PATIENT_SEX: Tag = Tag(0x0010, 0x0040);
    pub const PATIENT_AGE: Tag = Tag(0x0010, 0x1010);
    pub const CONTRAST_BOLUS_AGENT: Tag = Tag(0x0018, 0x0010);
    pub const BODY_PART_EXAMINED: Tag = Tag(0x0018, 0x0015);
    pub const SCANNING_SEQUENCE: Tag = Tag(0x0018, 0x0020);
    pub const SEQUENCE_VARIANT: Tag = Tag(0x0018, 0x0021);
    pub const SEQUENCE_NAME: Tag = Tag(0x0018, 0x0024);
    pub const SLICE_THICKNESS: Tag = Tag(0x0018, 0x0050);
    pub const CONVOLUTION_KERNEL: Tag = Tag(0x0018, 0x1210);
    pub const STUDY_INSTANCE_UID: Tag = Tag(0x0020, 0x000D);
    pub const SERIES_INSTANCE_UID: Tag = Tag(0x0020, 0x000E);
    pub const INSTANCE_NUMBER: Tag = Tag(0x0020, 0x0013);
    pub const IMAGE_POSITION_PATIENT: Tag = Tag(0x0020, 0x0032);
    pub const IMAGE_ORIENTATION_PATIENT: Tag = Tag(0x0020, 0x0037);
    pub const FRAME_OF_REFERENCE_UID: Tag = Tag(0x0020, 0x0052);
    pub const SAMPLES_PER_PIXEL: Tag = Tag(0x0028, 0x0002);
    pub const ROWS: Tag = Tag(0x0028, 0x0010);
    pub const COLUMNS: Tag = Tag(0x0028, 0x0011);
    pub const BITS_ALLOCATED: Tag = Tag(0x0028, 0x0100);
    pub const BITS_STORED: Tag = Tag(0x0028, 0x0101);
    pub const PIXEL_REPRESENTATION: Tag = Tag(0x0028, 0x0103);
    pub const REQUESTED_PROCEDURE_DESCRIPTION: Tag = Tag(0x0032, 0x1060);
    pub const PIXEL_DATA: Tag = Tag(0x7FE0, 0x0010);

    pub const ITEM: Tag = Tag(0xFFFE, 0xE000);
    pub const ITEM_DELIMITATION: Tag = Tag(0xFFFE, 0xE00D);
    pub const SEQUENCE_DELIMITATION: Tag = Tag(0xFFFE, 0xE0DD);
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DicomError {
    #[error("malformed DICOM at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
}

impl DicomError {
    fn at(offset: usize, reason: impl Into<String>) -> Self {
        DicomError::Malformed {
            offset,
            reason: reason.into(),
        }
    }

    pub fn offset(&self) -> usize {
        match self {
            DicomError::Malformed { offset, .. } => *offset,
        }
    }
}

pub type Result<T> = std::result::Result<T, DicomError>;

const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;
const MAX_NESTING: usize = 32;
const PREAMBLE_LEN: usize = 128;

/// VRs whose explicit encoding uses two reserved bytes and a 32-bit length.
const LONG_VRS: [&[u8; 2]; 13] = [
    b"OB", b"OD", b"OF", b"OL", b"OV", b"OW", b"SQ", b"SV", b"UC", b"UN", b"UR", b"UT", b"UV",
];

const KNOWN_VRS: [&[u8; 2]; 34] = [
    b"AE", b"AS", b"AT", b"CS", b"DA", b"DS", b"DT", b"FD", b"FL", b"IS", b"LO", b"LT", b"OB",
    b"OD", b"OF", b"OL", b"OV", b"OW", b"PN", b"SH", b"SL", b"SQ", b"SS", b"ST", b"SV", b"TM",
    b"UC", b"UI", b"UL", b"UN", b"UR", b"US", b"UT", b"UV",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VrEncoding {
    Explicit,
    Implicit,
}

/// Where the pixel data element's value lives in the source bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PixelDataLocation {
    /// Native (uncompressed) value bytes.
    Native(Range<usize>),
    /// Encapsulated fragments, basic offset table excluded.
    Encapsulated(Vec<Range<usize>>),
}

impl PixelDataLocation {
    /// Pixel payload as handed to the decoder; encapsulated fragments are
    /// concatenated (single-frame objects only).
    pub fn payload(&self, bytes: &[u8]) -> Vec<u8> {
        match self {
            PixelDataLocation::Native(r) => bytes[r.clone()].to_vec(),
            PixelDataLocation::Encapsulated(frags) => {
                let mut out = Vec::with_capacity(frags.iter().map(|r| r.len()).sum());
                for r in frags {
                    out.extend_from_slice(&bytes[r.clone()]);
                }
                out
            }
        }
    }
}

/// Byte layout facts needed to rewrite BodyPartExamined in place.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetLayout {
    pub dataset_offset: usize,
    pub encoding: VrEncoding,
    /// Full byte span (header + value) of a top-level (0018,0015) element.
    pub body_part_span: Option<Range<usize>>,
    /// Offset at which a missing (0018,0015) element would be inserted.
    pub body_part_insert_at: usize,
}

/// Series-level attributes carried by one file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeriesAttributes {
    pub series_uid: Option<String>,
    pub modality: Option<Modality>,
    pub series_description: Option<String>,
    pub frame_of_reference_uid: Option<String>,
    pub slice_thickness: Option<f64>,
    pub convolution_kernel: Option<String>,
    pub contrast_agent: Option<String>,
    pub sequence_tags: BTreeSet<String>,
}

/// Study-level attributes carried by one file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StudyAttributes {
    pub study_uid: Option<String>,
    pub patient_id: Option<String>,
    pub patient_age: Option<f64>,
    pub patient_sex: Option<Sex>,
    pub manufacturer: Option<String>,
    pub institution: Option<String>,
    pub body_part_examined: Option<String>,
    pub procedure_description: Option<String>,
}

/// Result of [`parse_dicom`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedDicom {
    pub image: ImageRecord,
    pub series: SeriesAttributes,
    pub study: StudyAttributes,
    pub pixel_data: Option<PixelDataLocation>,
    pub layout: DatasetLayout,
}

#[derive(Debug, Clone)]
struct RawElement {
    tag: Tag,
    vr: Option<[u8; 2]>,
    header_offset: usize,
    value: Range<usize>,
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn u16_at(&self, pos: usize) -> Result<u16> {
        self.bytes
            .get(pos..pos + 2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .ok_or_else(|| DicomError::at(pos, "truncated element"))
    }

    fn u32_at(&self, pos: usize) -> Result<u32> {
        self.bytes
            .get(pos..pos + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| DicomError::at(pos, "truncated element"))
    }

    fn tag_at(&self, pos: usize) -> Result<Tag> {
        Ok(Tag(self.u16_at(pos)?, self.u16_at(pos + 2)?))
    }

    /// Reads one element header at `pos`. Returns the element (value range
    /// empty-at-start when the length is undefined) and the undefined flag.
    fn element_header(&self, pos: usize, enc: VrEncoding) -> Result<(RawElement, bool)> {
        let tag = self.tag_at(pos)?;
        if tag.0 == 0xFFFE {
            return Err(DicomError::at(pos, format!("unexpected delimiter {tag}")));
        }
        let (vr, len, value_start) = match enc {
            VrEncoding::Implicit => (None, self.u32_at(pos + 4)?, pos + 8),
            VrEncoding::Explicit => {
                let vr_bytes = self
                    .bytes
                    .get(pos + 4..pos + 6)
                    .ok_or_else(|| DicomError::at(pos, "truncated element"))?;
                let vr = [vr_bytes[0], vr_bytes[1]];
                if !KNOWN_VRS.iter().any(|k| **k == vr) {
                    return Err(DicomError::at(
                        pos + 4,
                        format!("invalid VR {:?} for {tag}", String::from_utf8_lossy(&vr)),
                    ));
                }
                if LONG_VRS.iter().any(|k| **k == vr) {
                    (Some(vr), self.u32_at(pos + 8)?, pos + 12)
                } else {
                    (Some(vr), u32::from(self.u16_at(pos + 6)?), pos + 8)
                }
            }
        };
        if len == UNDEFINED_LENGTH {
            let el = RawElement {
                tag,
                vr,
                header_offset: pos,
                value: value_start..value_start,
            };
            return Ok((el, true));
        }
        let end = value_start
            .checked_add(len as usize)
            .filter(|end| *end <= self.bytes.len())
            .ok_or_else(|| {
                DicomError::at(pos, format!("length {len} of {tag} runs past end of input"))
            })?;
        let el = RawElement {
            tag,
            vr,
            header_offset: pos,
            value: value_start..end,
        };
        Ok((el, false))
    }

    /// Skips an undefined-length sequence starting at `pos` (first item tag).
    /// Returns the offset just past the sequence delimiter.
    fn skip_undefined_sequence(&self, mut pos: usize, enc: VrEncoding, depth: usize) -> Result<usize> {
        if depth > MAX_NESTING {
            return Err(DicomError::at(pos, "sequence nesting too deep"));
        }
        loop {
            let tag = self.tag_at(pos)?;
            let len = self.u32_at(pos + 4)?;
            pos += 8;
            match tag {
                tags::SEQUENCE_DELIMITATION => return Ok(pos),
                tags::ITEM if len == UNDEFINED_LENGTH => {
                    pos = self.walk_item(pos, enc, depth + 1)?;
                }
                tags::ITEM => {
                    pos = pos
                        .checked_add(len as usize)
                        .filter(|p| *p <= self.bytes.len())
                        .ok_or_else(|| DicomError::at(pos - 8, "item runs past end of input"))?;
                }
                other => {
                    return Err(DicomError::at(pos - 8, format!("expected item, found {other}")));
                }
            }
        }
    }

    /// Walks the elements of an undefined-length item until its delimiter.
    fn walk_item(&self, mut pos: usize, enc: VrEncoding, depth: usize) -> Result<usize> {
        loop {
            let tag = self.tag_at(pos)?;
            if tag == tags::ITEM_DELIMITATION {
                return Ok(pos + 8);
            }
            pos = self.skip_element(pos, enc, depth)?;
        }
    }

    fn skip_element(&self, pos: usize, enc: VrEncoding, depth: usize) -> Result<usize> {
        let (el, undefined) = self.element_header(pos, enc)?;
        if undefined {
            let inner = if el.vr == Some(*b"UN") {
                VrEncoding::Implicit
            } else {
                enc
            };
            self.skip_undefined_sequence(el.value.start, inner, depth + 1)
        } else {
            Ok(el.value.end)
        }
    }

    /// Encapsulated pixel data: item fragments until the sequence delimiter.
    fn encapsulated_fragments(&self, mut pos: usize) -> Result<(Vec<Range<usize>>, usize)> {
        let mut fragments = Vec::new();
        let mut first = true;
        loop {
            let tag = self.tag_at(pos)?;
            let len = self.u32_at(pos + 4)?;
            match tag {
                tags::SEQUENCE_DELIMITATION => return Ok((fragments, pos + 8)),
                tags::ITEM if len != UNDEFINED_LENGTH => {
                    let start = pos + 8;
                    let end = start
                        .checked_add(len as usize)
                        .filter(|e| *e <= self.bytes.len())
                        .ok_or_else(|| DicomError::at(pos, "pixel fragment runs past end of input"))?;
                    if !first {
                        fragments.push(start..end);
                    }
                    first = false;
                    pos = end;
                }
                other => {
                    return Err(DicomError::at(
                        pos,
                        format!("expected pixel data fragment, found {other}"),
                    ));
                }
            }
        }
    }

    /// Walks the top-level dataset from `pos` to the end of input.
    fn walk_top_level(
        &self,
        mut pos: usize,
        enc: VrEncoding,
        require_ascending: bool,
        visit: &mut dyn FnMut(&RawElement, Option<PixelDataLocation>),
    ) -> Result<()> {
        let mut last: Option<Tag> = None;
        while pos < self.bytes.len() {
            let (el, undefined) = self.element_header(pos, enc)?;
            if require_ascending && last.is_some_and(|t| t >= el.tag) {
                return Err(DicomError::at(pos, format!("tag {} out of order", el.tag)));
            }
            last = Some(el.tag);
            if el.tag == tags::PIXEL_DATA {
                if undefined {
                    let (frags, next) = self.encapsulated_fragments(el.value.start)?;
                    visit(&el, Some(PixelDataLocation::Encapsulated(frags)));
                    pos = next;
                } else {
                    visit(&el, Some(PixelDataLocation::Native(el.value.clone())));
                    pos = el.value.end;
                }
                continue;
            }
            visit(&el, None);
            if undefined {
                let inner = if el.vr == Some(*b"UN") {
                    VrEncoding::Implicit
                } else {
                    enc
                };
                pos = self.skip_undefined_sequence(el.value.start, inner, 1)?;
                continue;
            }
            pos = el.value.end;
        }
        Ok(())
    }
}

/// Parses a DICOM Part-10 file or a bare little-endian dataset.
pub fn parse_dicom(bytes: &[u8]) -> Result<ParsedDicom> {
    let reader = Reader { bytes };
    let has_magic = bytes.len() >= PREAMBLE_LEN + 4 && &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] == b"DICM";
    let (transfer_syntax, dataset_offset) = if has_magic {
        read_file_meta(&reader, PREAMBLE_LEN + 4)?
    } else {
        detect_bare_dataset(bytes)?
    };
    let encoding = match transfer_syntax.as_str() {
        ts::IMPLICIT_VR_LE => VrEncoding::Implicit,
        ts::EXPLICIT_VR_BE => {
            return Err(DicomError::at(dataset_offset, "big-endian transfer syntax is not supported"));
        }
        ts::DEFLATED_EXPLICIT_VR_LE => {
            return Err(DicomError::at(dataset_offset, "deflated transfer syntax is not supported"));
        }
        _ => VrEncoding::Explicit,
    };

    let mut builder = Builder::new(transfer_syntax, bytes.len());
    let mut failure = None;
    reader.walk_top_level(dataset_offset, encoding, !has_magic, &mut |el, pix| {
        if failure.is_none() {
            if let Err(e) = builder.accept(bytes, el, pix) {
                failure = Some(e);
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(builder.finish(dataset_offset, encoding))
}

fn read_file_meta(reader: &Reader<'_>, start: usize) -> Result<(String, usize)> {
    let mut pos = start;
    let mut transfer_syntax = None;
    while pos + 4 <= reader.bytes.len() && reader.u16_at(pos)? == 0x0002 {
        let (el, undefined) = reader.element_header(pos, VrEncoding::Explicit)?;
        if undefined {
            return Err(DicomError::at(pos, "undefined length in file meta group"));
        }
        if el.tag == tags::TRANSFER_SYNTAX_UID {
            transfer_syntax = Some(text(&reader.bytes[el.value.clone()]));
        }
        pos = el.value.end;
    }
    let ts = transfer_syntax
        .filter(|s| !s.is_empty())
        .ok_or_else(|| DicomError::at(start, "file meta lacks transfer syntax (0002,0010)"))?;
    Ok((ts, pos))
}

/// Decides whether unprefixed bytes form an explicit or implicit VR dataset.
/// The dataset must parse completely with ascending tags.
fn detect_bare_dataset(bytes: &[u8]) -> Result<(String, usize)> {
    if bytes.len() < 8 {
        return Err(DicomError::at(0, "missing DICM magic and too short to be a dataset"));
    }
    let looks_explicit = KNOWN_VRS.iter().any(|k| **k == [bytes[4], bytes[5]]);
    let candidates: &[(VrEncoding, &str)] = if looks_explicit {
        &[(VrEncoding::Explicit, ts::EXPLICIT_VR_LE), (VrEncoding::Implicit, ts::IMPLICIT_VR_LE)]
    } else {
        &[(VrEncoding::Implicit, ts::IMPLICIT_VR_LE)]
    };
    let reader = Reader { bytes };
    let mut last_err = None;
    for (enc, uid) in candidates {
        match reader.walk_top_level(0, *enc, true, &mut |_, _| {}) {
            Ok(()) => return Ok((uid.to_string(), 0)),
            Err(e) => last_err = Some(e),
        }
    }
    let inner = last_err.expect("at least one candidate encoding");
    Err(DicomError::at(
        inner.offset(),
        format!("missing DICM magic and not a little-endian dataset ({inner})"),
    ))
}

struct Builder {
    image: ImageRecord,
    series: SeriesAttributes,
    study: StudyAttributes,
    pixel_data: Option<PixelDataLocation>,
    body_part_span: Option<Range<usize>>,
    body_part_insert_at: Option<usize>,
    input_len: usize,
    study_description: Option<String>,
}

impl Builder {
    fn new(transfer_syntax: String, input_len: usize) -> Self {
        Builder {
            image: ImageRecord::new(String::new(), transfer_syntax),
            series: SeriesAttributes::default(),
            study: StudyAttributes::default(),
            pixel_data: None,
            body_part_span: None,
            body_part_insert_at: None,
            input_len,
            study_description: None,
        }
    }

    fn accept(&mut self, bytes: &[u8], el: &RawElement, pix: Option<PixelDataLocation>) -> Result<()> {
        let value = &bytes[el.value.clone()];
        let at = el.header_offset;
        if el.tag > tags::BODY_PART_EXAMINED && self.body_part_insert_at.is_none() {
            self.body_part_insert_at = Some(at);
        }
        if el.vr == Some(*b"SQ") {
            return Ok(());
        }
        match el.tag {
            tags::SOP_CLASS_UID => self.image.sop_class_uid = opt_text(value),
            tags::SOP_INSTANCE_UID => self.image.sop_uid = text(value),
            tags::MODALITY => self.series.modality = opt_text(value).map(Modality::from),
            tags::MANUFACTURER => self.study.manufacturer = opt_text(value),
            tags::INSTITUTION_NAME => self.study.institution = opt_text(value),
            tags::STUDY_DESCRIPTION => self.study_description = opt_text(value),
            tags::SERIES_DESCRIPTION => self.series.series_description = opt_text(value),
            tags::PATIENT_ID => self.study.patient_id = opt_text(value),
            tags::PATIENT_SEX => {
                self.study.patient_sex = opt_text(value).and_then(|s| Sex::from_code(&s));
            }
            tags::PATIENT_AGE => {
                self.study.patient_age = match opt_text(value) {
                    Some(s) => Some(parse_age(&s).ok_or_else(|| {
                        DicomError::at(at, format!("invalid PatientAge {s:?}"))
                    })?),
                    None => None,
                }
            }
            tags::CONTRAST_BOLUS_AGENT => self.series.contrast_agent = opt_text(value),
            tags::BODY_PART_EXAMINED => {
                self.study.body_part_examined = opt_text(value);
                self.body_part_span = Some(at..el.value.end);
            }
            tags::SCANNING_SEQUENCE | tags::SEQUENCE_VARIANT | tags::SEQUENCE_NAME => {
                for part in text(value).split('\\') {
                    let part = part.trim();
                    if !part.is_empty() {
                        self.series.sequence_tags.insert(part.to_string());
                    }
                }
            }
            tags::SLICE_THICKNESS => self.series.slice_thickness = decimal_values::<1>(value, at)?.map(|v| v[0]),
            tags::CONVOLUTION_KERNEL => self.series.convolution_kernel = opt_text(value),
            tags::STUDY_INSTANCE_UID => self.study.study_uid = opt_text(value),
            tags::SERIES_INSTANCE_UID => self.series.series_uid = opt_text(value),
            tags::INSTANCE_NUMBER => {
                self.image.instance_number = match opt_text(value) {
                    Some(s) => Some(s.parse::<i32>().map_err(|_| {
                        DicomError::at(at, format!("invalid InstanceNumber {s:?}"))
                    })?),
                    None => None,
                }
            }
            tags::IMAGE_POSITION_PATIENT => self.image.image_position_patient = decimal_values::<3>(value, at)?,
            tags::IMAGE_ORIENTATION_PATIENT => {
                self.image.image_orientation_patient = decimal_values::<6>(value, at)?
            }
            tags::FRAME_OF_REFERENCE_UID => self.series.frame_of_reference_uid = opt_text(value),
            tags::SAMPLES_PER_PIXEL => self.image.samples_per_pixel = Some(us(value, el, at)?),
            tags::ROWS => self.image.rows = Some(us(value, el, at)?),
            tags::COLUMNS => self.image.cols = Some(us(value, el, at)?),
            tags::BITS_ALLOCATED => self.image.bits_allocated = Some(us(value, el, at)?),
            tags::BITS_STORED => self.image.bits_stored = Some(us(value, el, at)?),
            tags::PIXEL_REPRESENTATION => self.image.pixel_representation = Some(us(value, el, at)?),
            tags::REQUESTED_PROCEDURE_DESCRIPTION => self.study.procedure_description = opt_text(value),
            tags::PIXEL_DATA => {
                self.image.has_pixel_data = true;
                self.pixel_data = pix;
            }
            _ => {}
        }
        Ok(())
    }

    fn finish(mut self, dataset_offset: usize, encoding: VrEncoding) -> ParsedDicom {
        if self.study.procedure_description.is_none() {
            self.study.procedure_description = self.study_description.take();
        }
        ParsedDicom {
            image: self.image,
            series: self.series,
            study: self.study,
            pixel_data: self.pixel_data,
            layout: DatasetLayout {
                dataset_offset,
                encoding,
                body_part_span: self.body_part_span,
                body_part_insert_at: self.body_part_insert_at.unwrap_or(self.input_len),
            },
        }
    }
}

fn text(value: &[u8]) -> String {
    String::from_utf8_lossy(value)
        .trim_matches(|c: char| c == '\0' || c.is_whitespace())
        .to_string()
}

fn opt_text(value: &[u8]) -> Option<String> {
    Some(text(value)).filter(|s| !s.is_empty())
}

fn us(value: &[u8], el: &RawElement, at: usize) -> Result<u16> {
    if let Some(vr) = el.vr {
        if &vr != b"US" && &vr != b"SS" {
            return Err(DicomError::at(
                at,
                format!("{} has VR {} but US was expected", el.tag, String::from_utf8_lossy(&vr)),
            ));
        }
    }
    if value.len() != 2 {
        return Err(DicomError::at(at, format!("{} must hold one 16-bit value", el.tag)));
    }
    Ok(u16::from_le_bytes([value[0], value[1]]))
}

/// Parses a fixed-multiplicity DS value; empty value means absent.
fn decimal_values<const N: usize>(value: &[u8], at: usize) -> Result<Option<[f64; N]>> {
    let s = text(value);
    if s.is_empty() {
        return Ok(None);
    }
    let mut out = [0.0; N];
    let parts: Vec<&str> = s.split('\\').collect();
    if parts.len() != N {
        return Err(DicomError::at(at, format!("expected {N} decimal values, found {}", parts.len())));
    }
    for (slot, part) in out.iter_mut().zip(parts) {
        let v = part
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| DicomError::at(at, format!("invalid decimal string {part:?}")))?;
        *slot = v;
    }
    Ok(Some(out))
}

/// Converts an AS value (`nnnD|W|M|Y`) or a bare number to years.
pub fn parse_age(s: &str) -> Option<f64> {
    let s = s.trim();
    let (digits, unit) = match s.chars().last()? {
        c if c.is_ascii_digit() => (s, 'Y'),
        c => (&s[..s.len() - c.len_utf8()], c.to_ascii_uppercase()),
    };
    let n: f64 = digits.trim().parse::<u32>().ok()?.into();
    match unit {
        'Y' => Some(n),
        'M' => Some(n / 12.0),
        'W' => Some(n * 7.0 / 365.25),
        'D' => Some(n / 365.25),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::writer::{DicomWriter, Value};

    fn minimal_ct() -> Vec<u8> {
        let mut w = DicomWriter::explicit_le("1.2.3.4");
        w.put(tags::MODALITY, Value::cs("CT"));
        w.put(tags::BITS_ALLOCATED, Value::Us(16));
        w.to_part10()
    }

    #[test]
    fn reads_modality_and_bits_from_part10() {
        let parsed = parse_dicom(&minimal_ct()).unwrap();
        assert_eq!(parsed.series.modality, Some(Modality::Ct));
        assert_eq!(parsed.image.bits_allocated, Some(16));
        assert_eq!(parsed.image.sop_uid, "1.2.3.4");
        assert_eq!(parsed.image.transfer_syntax_uid, ts::EXPLICIT_VR_LE);
    }

    #[test]
    fn hand_encoded_bits_allocated_element() {
        // (0028,0100) US, length 2, value 16, as a bare explicit VR dataset.
        let bytes = [0x28, 0x00, 0x00, 0x01, b'U', b'S', 0x02, 0x00, 0x10, 0x00];
        let parsed = parse_dicom(&bytes).unwrap();
        assert_eq!(parsed.image.bits_allocated, Some(16));
        assert_eq!(parsed.image.transfer_syntax_uid, ts::EXPLICIT_VR_LE);
    }

    #[test]
    fn implicit_bare_dataset() {
        // (0008,0060) implicit length 2 "CT"
        let bytes = [0x08, 0x00, 0x60, 0x00, 0x02, 0x00, 0x00, 0x00, b'C', b'T'];
        let parsed = parse_dicom(&bytes).unwrap();
        assert_eq!(parsed.series.modality, Some(Modality::Ct));
        assert_eq!(parsed.image.transfer_syntax_uid, ts::IMPLICIT_VR_LE);
    }

    #[test]
    fn garbage_without_magic_is_malformed() {
        let bytes = vec![0xAB; 300];
        assert!(matches!(parse_dicom(&bytes), Err(DicomError::Malformed { .. })));
        assert!(parse_dicom(b"").is_err());
        assert!(parse_dicom(b"hello").is_err());
    }

    #[test]
    fn truncated_element_names_offset() {
        let mut bytes = minimal_ct();
        let n = bytes.len();
        bytes.truncate(n - 1);
        match parse_dicom(&bytes) {
            Err(DicomError::Malformed { offset, .. }) => assert!(offset >= 132 && offset < n),
            other => panic!("expected Malformed, got {other:?}"),
        }
    }

    #[test]
    fn length_past_end_is_malformed() {
        let bytes = [0x08, 0x00, 0x60, 0x00, b'C', b'S', 0x20, 0x00, b'C', b'T'];
        let err = parse_dicom(&bytes).unwrap_err();
        assert!(err.to_string().contains("byte"));
    }

    #[test]
    fn sequences_are_skipped() {
        let mut w = DicomWriter::explicit_le("1.2.3");
        w.put(tags::MODALITY, Value::cs("MR"));
        // undefined-length SQ with one undefined-length item holding a CS element
        let mut seq = Vec::new();
        seq.extend_from_slice(&[0xFE, 0xFF, 0x00, 0xE0, 0xFF, 0xFF, 0xFF, 0xFF]);
        seq.extend_from_slice(&[0x08, 0x00, 0x60, 0x00, b'C', b'S', 0x02, 0x00, b'C', b'T']);
        seq.extend_from_slice(&[0xFE, 0xFF, 0x0D, 0xE0, 0, 0, 0, 0]);
        seq.extend_from_slice(&[0xFE, 0xFF, 0xDD, 0xE0, 0, 0, 0, 0]);
        w.put_raw_undefined(Tag(0x0008, 0x1140), *b"SQ", seq);
        w.put(tags::ROWS, Value::Us(4));
        let parsed = parse_dicom(&w.to_part10()).unwrap();
        assert_eq!(parsed.series.modality, Some(Modality::Mr));
        assert_eq!(parsed.image.rows, Some(4));
    }

    #[test]
    fn encapsulated_pixel_fragments_located() {
        let mut w = DicomWriter::with_transfer_syntax("1.2.3", ts::RLE_LOSSLESS);
        w.put(tags::ROWS, Value::Us(1));
        w.put_encapsulated_pixels(vec![vec![1, 2, 3, 4], vec![5, 6]]);
        let bytes = w.to_part10();
        let parsed = parse_dicom(&bytes).unwrap();
        let loc = parsed.pixel_data.unwrap();
        assert_eq!(loc.payload(&bytes), vec![1, 2, 3, 4, 5, 6]);
        assert!(parsed.image.has_pixel_data);
    }

    #[test]
    fn age_strings() {
        assert_eq!(parse_age("045Y"), Some(45.0));
        assert_eq!(parse_age("006M"), Some(0.5));
        assert_eq!(parse_age("62"), Some(62.0));
        assert_eq!(parse_age("abc"), None);
        assert_eq!(parse_age(""), None);
    }

    #[test]
    fn big_endian_rejected() {
        let w = DicomWriter::with_transfer_syntax("1.2", ts::EXPLICIT_VR_BE);
        assert!(parse_dicom(&w.to_part10()).is_err());
    }
}
