//! Minimal little-endian DICOM encoder.
//!
//! Produces Part-10 files or bare datasets from a tag → value map. Used by
//! the phantom generator, BodyPartExamined write-back, and test fixtures.

use std::collections::BTreeMap;

use super::dicom::{tags, ts, Tag, VrEncoding};

const IMPLEMENTATION_CLASS_UID: &str = "1.2.826.0.1.3680043.10.1462.1";
const IMPLEMENTATION_VERSION: &str = "BODYREGION_01";

/// A value to encode.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    /// Text value with its VR (`CS`, `LO`, `SH`, `UI`, `DS`, `IS`, `AS`, ...).
    Text([u8; 2], String),
    Us(u16),
    /// Raw bytes with their VR.
    Bytes([u8; 2], Vec<u8>),
}

impl Value {
    pub fn cs(s: &str) -> Value {
        Value::Text(*b"CS", s.to_string())
    }
    pub fn lo(s: &str) -> Value {
        Value::Text(*b"LO", s.to_string())
    }
    pub fn sh(s: &str) -> Value {
        Value::Text(*b"SH", s.to_string())
    }
    pub fn ui(s: &str) -> Value {
        Value::Text(*b"UI", s.to_string())
    }
    pub fn is(v: i64) -> Value {
        Value::Text(*b"IS", v.to_string())
    }
    pub fn as_age(years: u32) -> Value {
        Value::Text(*b"AS", format!("{years:03}Y"))
    }
    pub fn ds(values: &[f64]) -> Value {
        let parts: Vec<String> = values.iter().map(|v| format_ds(*v)).collect();
        Value::Text(*b"DS", parts.join("\\"))
    }

    fn vr(&self) -> [u8; 2] {
        match self {
            Value::Text(vr, _) | Value::Bytes(vr, _) => *vr,
            Value::Us(_) => *b"US",
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            Value::Text(vr, s) => {
                let mut b = s.as_bytes().to_vec();
                if b.len() % 2 == 1 {
                    b.push(if vr == b"UI" { 0 } else { b' ' });
                }
                b
            }
            Value::Us(v) => v.to_le_bytes().to_vec(),
            Value::Bytes(_, b) => {
                let mut b = b.clone();
                if b.len() % 2 == 1 {
                    b.push(0);
                }
                b
            }
        }
    }
}

/// Formats a decimal string value within the 16-byte DS limit.
pub fn format_ds(v: f64) -> String {
    let plain = v.to_string();
    if plain.len() <= 16 {
        return plain;
    }
    for prec in (1..=14).rev() {
        let s = format!("{v:.prec$}");
        let s = if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        };
        if s.len() <= 16 {
            return s;
        }
    }
    format!("{v:.6e}")
}

fn is_long_vr(vr: &[u8; 2]) -> bool {
    matches!(
        vr,
        b"OB" | b"OD" | b"OF" | b"OL" | b"OV" | b"OW" | b"SQ" | b"SV" | b"UC" | b"UN" | b"UR" | b"UT" | b"UV"
    )
}

/// Encodes one defined-length element.
pub fn encode_element(tag: Tag, value: &Value, encoding: VrEncoding) -> Vec<u8> {
    encode_raw(tag, value.vr(), &value.bytes(), encoding)
}

fn encode_raw(tag: Tag, vr: [u8; 2], body: &[u8], encoding: VrEncoding) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 12);
    out.extend_from_slice(&tag.0.to_le_bytes());
    out.extend_from_slice(&tag.1.to_le_bytes());
    let len = body.len() as u32;
    match encoding {
        VrEncoding::Implicit => out.extend_from_slice(&len.to_le_bytes()),
        VrEncoding::Explicit => {
            out.extend_from_slice(&vr);
            if is_long_vr(&vr) {
                out.extend_from_slice(&[0, 0]);
                out.extend_from_slice(&len.to_le_bytes());
            } else {
                out.extend_from_slice(&(len as u16).to_le_bytes());
            }
        }
    }
    out.extend_from_slice(body);
    out
}

fn encode_undefined(tag: Tag, vr: [u8; 2], body: &[u8], encoding: VrEncoding) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 12);
    out.extend_from_slice(&tag.0.to_le_bytes());
    out.extend_from_slice(&tag.1.to_le_bytes());
    if encoding == VrEncoding::Explicit {
        out.extend_from_slice(&vr);
        out.extend_from_slice(&[0, 0]);
    }
    out.extend_from_slice(&0xFFFF_FFFFu32.to_le_bytes());
    out.extend_from_slice(body);
    out
}

#[derive(Debug, Clone)]
enum Entry {
    Defined(Value),
    Undefined([u8; 2], Vec<u8>),
}

/// Builder for a single-frame image object.
#[derive(Debug, Clone)]
pub struct DicomWriter {
    transfer_syntax: String,
    elements: BTreeMap<Tag, Entry>,
}

impl DicomWriter {
    pub fn with_transfer_syntax(sop_uid: &str, transfer_syntax: &str) -> Self {
        let mut w = DicomWriter {
            transfer_syntax: transfer_syntax.to_string(),
            elements: BTreeMap::new(),
        };
        w.put(tags::SOP_INSTANCE_UID, Value::ui(sop_uid));
        w
    }

    pub fn explicit_le(sop_uid: &str) -> Self {
        Self::with_transfer_syntax(sop_uid, ts::EXPLICIT_VR_LE)
    }

    pub fn implicit_le(sop_uid: &str) -> Self {
        Self::with_transfer_syntax(sop_uid, ts::IMPLICIT_VR_LE)
    }

    pub fn encoding(&self) -> VrEncoding {
        if self.transfer_syntax == ts::IMPLICIT_VR_LE {
            VrEncoding::Implicit
        } else {
            VrEncoding::Explicit
        }
    }

    pub fn put(&mut self, tag: Tag, value: Value) -> &mut Self {
        self.elements.insert(tag, Entry::Defined(value));
        self
    }

    /// Inserts an undefined-length element whose encoded body (items and
    /// delimiters) is supplied verbatim.
    pub fn put_raw_undefined(&mut self, tag: Tag, vr: [u8; 2], body: Vec<u8>) -> &mut Self {
        self.elements.insert(tag, Entry::Undefined(vr, body));
        self
    }

    /// Native pixel data as OW.
    pub fn put_native_pixels(&mut self, bytes: Vec<u8>) -> &mut Self {
        self.put(tags::PIXEL_DATA, Value::Bytes(*b"OW", bytes))
    }

    /// Encapsulated pixel data: empty basic offset table, then one item per fragment.
    pub fn put_encapsulated_pixels(&mut self, fragments: Vec<Vec<u8>>) -> &mut Self {
        let mut body = Vec::new();
        body.extend_from_slice(&[0xFE, 0xFF, 0x00, 0xE0, 0, 0, 0, 0]);
        for mut frag in fragments {
            if frag.len() % 2 == 1 {
                frag.push(0);
            }
            body.extend_from_slice(&[0xFE, 0xFF, 0x00, 0xE0]);
            body.extend_from_slice(&(frag.len() as u32).to_le_bytes());
            body.extend_from_slice(&frag);
        }
        body.extend_from_slice(&[0xFE, 0xFF, 0xDD, 0xE0, 0, 0, 0, 0]);
        self.put_raw_undefined(tags::PIXEL_DATA, *b"OB", body)
    }

    /// Encodes the dataset without preamble or file meta.
    pub fn to_dataset(&self) -> Vec<u8> {
        let enc = self.encoding();
        let mut out = Vec::new();
        for (tag, entry) in &self.elements {
            match entry {
                Entry::Defined(v) => out.extend(encode_element(*tag, v, enc)),
                Entry::Undefined(vr, body) => out.extend(encode_undefined(*tag, *vr, body, enc)),
            }
        }
        out
    }

    /// Encodes a complete Part-10 file.
    pub fn to_part10(&self) -> Vec<u8> {
        let text = |tag: Tag| match self.elements.get(&tag) {
            Some(Entry::Defined(Value::Text(_, s))) => Some(s.clone()),
            _ => None,
        };
        let mut meta = Vec::new();
        meta.extend(encode_element(
            Tag(0x0002, 0x0001),
            &Value::Bytes(*b"OB", vec![0, 1]),
            VrEncoding::Explicit,
        ));
        if let Some(class) = text(tags::SOP_CLASS_UID) {
            meta.extend(encode_element(Tag(0x0002, 0x0002), &Value::ui(&class), VrEncoding::Explicit));
        }
        if let Some(inst) = text(tags::SOP_INSTANCE_UID) {
            meta.extend(encode_element(Tag(0x0002, 0x0003), &Value::ui(&inst), VrEncoding::Explicit));
        }
        meta.extend(encode_element(
            tags::TRANSFER_SYNTAX_UID,
            &Value::ui(&self.transfer_syntax),
            VrEncoding::Explicit,
        ));
        meta.extend(encode_element(
            Tag(0x0002, 0x0012),
            &Value::ui(IMPLEMENTATION_CLASS_UID),
            VrEncoding::Explicit,
        ));
        meta.extend(encode_element(
            Tag(0x0002, 0x0013),
            &Value::sh(IMPLEMENTATION_VERSION),
            VrEncoding::Explicit,
        ));

        let mut out = vec![0u8; 128];
        out.extend_from_slice(b"DICM");
        out.extend(encode_raw(
            Tag(0x0002, 0x0000),
            *b"UL",
            &(meta.len() as u32).to_le_bytes(),
            VrEncoding::Explicit,
        ));
        out.extend(meta);
        out.extend(self.to_dataset());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ds_fits_sixteen_bytes() {
        assert_eq!(format_ds(2.0), "2");
        assert_eq!(format_ds(-12.5), "-12.5");
        let s = format_ds(std::f64::consts::FRAC_1_SQRT_2);
        assert!(s.len() <= 16, "{s}");
        assert!((s.parse::<f64>().unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn explicit_short_and_long_headers() {
        let short = encode_element(Tag(0x0008, 0x0060), &Value::cs("CT"), VrEncoding::Explicit);
        assert_eq!(short, vec![0x08, 0x00, 0x60, 0x00, b'C', b'S', 2, 0, b'C', b'T']);
        let long = encode_element(
            Tag(0x7FE0, 0x0010),
            &Value::Bytes(*b"OW", vec![1, 0]),
            VrEncoding::Explicit,
        );
        assert_eq!(long, vec![0xE0, 0x7F, 0x10, 0x00, b'O', b'W', 0, 0, 2, 0, 0, 0, 1, 0]);
    }

    #[test]
    fn odd_text_is_padded() {
        let el = encode_element(Tag(0x0018, 0x0015), &Value::cs("LEG"), VrEncoding::Implicit);
        assert_eq!(&el[4..8], &4u32.to_le_bytes());
        assert_eq!(&el[8..], b"LEG ");
        let uid = encode_element(Tag(0x0008, 0x0018), &Value::ui("1.2.3"), VrEncoding::Explicit);
        assert_eq!(*uid.last().unwrap(), 0);
    }
}
