//! Pixel data decoding: native little-endian and DICOM RLE Lossless.

use ndarray::Array2;

use super::dicom::ts;
use super::records::{ImageRecord, PixelMatrix};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("pixel codec {0} is not supported for decoding")]
    UnsupportedCodec(String),
    #[error("pixel layout not supported: {0}")]
    UnsupportedLayout(String),
    #[error("pixel data length mismatch: expected {expected} bytes, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid RLE data: {0}")]
    InvalidRle(String),
}

/// Whether the transfer syntax's pixel data can be decoded here.
pub fn is_decodable_syntax(uid: &str) -> bool {
    matches!(uid, ts::IMPLICIT_VR_LE | ts::EXPLICIT_VR_LE | ts::RLE_LOSSLESS)
}

struct Layout {
    rows: usize,
    cols: usize,
    bytes_per_sample: usize,
    bits_stored: u32,
    signed: bool,
}

fn layout(image: &ImageRecord) -> Result<Layout, DecodeError> {
    let rows = image
        .rows
        .ok_or_else(|| DecodeError::UnsupportedLayout("Rows missing".into()))?;
    let cols = image
        .cols
        .ok_or_else(|| DecodeError::UnsupportedLayout("Columns missing".into()))?;
    if rows == 0 || cols == 0 {
        return Err(DecodeError::UnsupportedLayout(format!("{rows}x{cols} image")));
    }
    let samples = image.samples_per_pixel.unwrap_or(1);
    if samples != 1 {
        return Err(DecodeError::UnsupportedLayout(format!("{samples} samples per pixel")));
    }
    let allocated = image
        .bits_allocated
        .ok_or_else(|| DecodeError::UnsupportedLayout("BitsAllocated missing".into()))?;
    let bytes_per_sample = match allocated {
        8 => 1,
        16 => 2,
        32 => 4,
        other => return Err(DecodeError::UnsupportedLayout(format!("{other} bits allocated"))),
    };
    let bits_stored = u32::from(image.bits_stored.unwrap_or(allocated));
    if bits_stored == 0 || bits_stored > u32::from(allocated) {
        return Err(DecodeError::UnsupportedLayout(format!(
            "{bits_stored} bits stored in {allocated} allocated"
        )));
    }
    Ok(Layout {
        rows: usize::from(rows),
        cols: usize::from(cols),
        bytes_per_sample,
        bits_stored,
        signed: image.pixel_representation == Some(1),
    })
}

fn sample_value(raw: u32, layout: &Layout) -> i64 {
    let bits = layout.bits_stored;
    let masked = if bits >= 32 { raw } else { raw & ((1u32 << bits) - 1) };
    if layout.signed && bits < 64 && (masked >> (bits - 1)) & 1 == 1 {
        i64::from(masked) - (1i64 << bits)
    } else {
        i64::from(masked)
    }
}

/// Decodes a single-frame pixel payload into a rows × cols matrix.
///
/// `raw` is the native value bytes, or the concatenated encapsulated
/// fragments for RLE. Samples are masked to BitsStored and sign-extended
/// when PixelRepresentation is 1.
pub fn decode_pixels(image: &ImageRecord, raw: &[u8]) -> Result<PixelMatrix, DecodeError> {
    let uid = image.transfer_syntax_uid.as_str();
    if !is_decodable_syntax(uid) {
        return Err(DecodeError::UnsupportedCodec(uid.to_string()));
    }
    let layout = layout(image)?;
    let n = layout.rows * layout.cols;
    let expected = n * layout.bytes_per_sample;
    let samples: Vec<i64> = if uid == ts::RLE_LOSSLESS {
        let planes = rle_decode_frame(raw, layout.bytes_per_sample, n)?;
        (0..n)
            .map(|i| {
                // segments are ordered most significant byte first
                let raw = planes.iter().fold(0u32, |acc, plane| (acc << 8) | u32::from(plane[i]));
                sample_value(raw, &layout)
            })
            .collect()
    } else {
        if raw.len() != expected && raw.len() != expected + 1 {
            return Err(DecodeError::LengthMismatch {
                expected,
                actual: raw.len(),
            });
        }
        raw[..expected]
            .chunks_exact(layout.bytes_per_sample)
            .map(|c| {
                let mut buf = [0u8; 4];
                buf[..c.len()].copy_from_slice(c);
                sample_value(u32::from_le_bytes(buf), &layout)
            })
            .collect()
    };
    Ok(Array2::from_shape_vec((layout.rows, layout.cols), samples)
        .expect("sample count equals rows * cols"))
}

/// Decodes one PackBits segment into exactly `expected` bytes.
///
/// Header byte n in 0..=127 copies the next n+1 bytes; n in -127..=-1
/// repeats the next byte 1-n times; -128 is a no-op. Output past `expected`
/// (segment padding) is discarded.
pub fn packbits_decode(segment: &[u8], expected: usize) -> Result<Vec<u8>, DecodeError> {
    let mut out = Vec::with_capacity(expected.min(segment.len().saturating_mul(128)));
    let mut pos = 0;
    while out.len() < expected && pos < segment.len() {
        let header = segment[pos] as i8;
        pos += 1;
        match header {
            0..=127 => {
                let count = header as usize + 1;
                let literal = segment.get(pos..pos + count).ok_or_else(|| {
                    DecodeError::InvalidRle(format!("literal run of {count} truncated at byte {pos}"))
                })?;
                out.extend_from_slice(literal);
                pos += count;
            }
            -128 => {}
            _ => {
                let count = 1 - header as isize;
                let byte = *segment.get(pos).ok_or_else(|| {
                    DecodeError::InvalidRle(format!("replicate run truncated at byte {pos}"))
                })?;
                out.extend(std::iter::repeat_n(byte, count as usize));
                pos += 1;
            }
        }
    }
    if out.len() < expected {
        return Err(DecodeError::LengthMismatch {
            expected,
            actual: out.len(),
        });
    }
    out.truncate(expected);
    Ok(out)
}

/// Splits an RLE frame into its segments and decodes each to `pixels` bytes.
pub fn rle_decode_frame(
    frame: &[u8],
    bytes_per_sample: usize,
    pixels: usize,
) -> Result<Vec<Vec<u8>>, DecodeError> {
    if frame.len() < 64 {
        return Err(DecodeError::InvalidRle("frame shorter than 64-byte header".into()));
    }
    let word = |i: usize| u32::from_le_bytes([frame[i * 4], frame[i * 4 + 1], frame[i * 4 + 2], frame[i * 4 + 3]]) as usize;
    let count = word(0);
    if count != bytes_per_sample {
        return Err(DecodeError::InvalidRle(format!(
            "{count} segments for {bytes_per_sample} bytes per sample"
        )));
    }
    let offsets: Vec<usize> = (1..=count).map(word).collect();
    let mut planes = Vec::with_capacity(count);
    for (i, &start) in offsets.iter().enumerate() {
        let end = offsets.get(i + 1).copied().unwrap_or(frame.len());
        if start < 64 || start > end || end > frame.len() {
            return Err(DecodeError::InvalidRle(format!(
                "segment {i} offsets {start}..{end} outside frame of {} bytes",
                frame.len()
            )));
        }
        planes.push(packbits_decode(&frame[start..end], pixels)?);
    }
    Ok(planes)
}

/// PackBits-encodes one byte plane, padded to even length.
pub fn packbits_encode(data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() + data.len() / 64 + 2);
    let mut i = 0;
    while i < data.len() {
        let mut run = 1;
        while i + run < data.len() && run < 128 && data[i + run] == data[i] {
            run += 1;
        }
        if run >= 2 {
            out.push((1i16 - run as i16) as i8 as u8);
            out.push(data[i]);
            i += run;
            continue;
        }
        let start = i;
        let mut len = 0;
        while i < data.len() && len < 128 {
            if i + 1 < data.len() && data[i + 1] == data[i] {
                break;
            }
            i += 1;
            len += 1;
        }
        out.push((len - 1) as u8);
        out.extend_from_slice(&data[start..start + len]);
    }
    if out.len() % 2 == 1 {
        out.push(0x80);
    }
    out
}

/// Encodes samples (row-major) as a single DICOM RLE frame.
pub fn rle_encode_frame(samples: &[i64], bytes_per_sample: usize) -> Vec<u8> {
    let planes: Vec<Vec<u8>> = (0..bytes_per_sample)
        .map(|b| {
            let shift = 8 * (bytes_per_sample - 1 - b);
            samples.iter().map(|&v| ((v as u64) >> shift) as u8).collect()
        })
        .collect();
    let segments: Vec<Vec<u8>> = planes.iter().map(|p| packbits_encode(p)).collect();
    let mut header = [0u32; 16];
    header[0] = segments.len() as u32;
    let mut offset = 64u32;
    for (i, seg) in segments.iter().enumerate() {
        header[i + 1] = offset;
        offset += seg.len() as u32;
    }
    let mut out = Vec::with_capacity(offset as usize);
    for w in header {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for seg in segments {
        out.extend(seg);
    }
    out
}
