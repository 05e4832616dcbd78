//! Decoded pixels agree with pydicom on native and RLE fixtures
//! (see fixtures/pixels/make_fixtures.py).

use std::fs;
use std::path::PathBuf;

use bodyregion::ingest::dicom::ts;
use bodyregion::ingest::pixels::rle_encode_frame;
use bodyregion::ingest::{decode_pixels, parse_dicom, PixelMatrix};

const CASES: [&str; 5] = ["native_u12", "native_s16_implicit", "rle_u12", "rle_s16", "rle_u8"];

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pixels").join(name)
}

fn expected(name: &str) -> Vec<Vec<i64>> {
    fs::read_to_string(fixture(&format!("{name}.txt")))
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn decode(name: &str) -> (bodyregion::ingest::ImageRecord, PixelMatrix) {
    let bytes = fs::read(fixture(&format!("{name}.dcm"))).unwrap();
    let parsed = parse_dicom(&bytes).unwrap();
    let payload = parsed.pixel_data.as_ref().unwrap().payload(&bytes);
    let pixels = decode_pixels(&parsed.image, &payload).unwrap();
    (parsed.image, pixels)
}

#[test]
fn matches_pydicom() {
    for name in CASES {
        let (_, pixels) = decode(name);
        let want = expected(name);
        assert_eq!(pixels.nrows(), want.len(), "{name}");
        for (r, row) in want.iter().enumerate() {
            assert_eq!(pixels.row(r).to_vec(), *row, "{name} row {r}");
        }
    }
}

#[test]
fn rle_encoder_round_trips_fixtures() {
    for name in CASES {
        let (mut image, pixels) = decode(name);
        let bytes_per_sample = usize::from(image.bits_allocated.unwrap() / 8);
        let samples: Vec<i64> = pixels.iter().copied().collect();
        let frame = rle_encode_frame(&samples, bytes_per_sample);
        image.transfer_syntax_uid = ts::RLE_LOSSLESS.to_string();
        assert_eq!(decode_pixels(&image, &frame).unwrap(), pixels, "{name}");
    }
}
