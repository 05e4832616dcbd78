//! Deterministic synthetic cohorts: stacked body regions with distinct
//! textures, written as DICOM files plus ground-truth boxes.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::{BodyRegion, Modality};
use super::files::write_truth_csv;
use crate::geometry::{write_label_file, BoundingBox3D, AXIAL};
use crate::ingest::dicom::{tags, ts};
use crate::ingest::pixels::rle_encode_frame;
use crate::ingest::writer::{DicomWriter, Value};

const CT_IMAGE_STORAGE: &str = "1.2.840.10008.5.1.4.1.1.2";
const MR_IMAGE_STORAGE: &str = "1.2.840.10008.5.1.4.1.1.4";
const BITS_STORED: u16 = 12;
const MAX_VALUE: f64 = 4095.0;
/// In-plane half-width of generated boxes, mm.
const BOX_HALF_WIDTH: f64 = 500.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomRegion {
    pub region: BodyRegion,
    pub extent_mm: f64,
    /// Overrides the region's default texture.
    #[serde(default)]
    pub texture: Option<Texture>,
}

/// Oriented stripes inside a disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Texture {
    /// Stripe cycles across the image.
    pub frequency: f64,
    pub angle_deg: f64,
    /// Disk radius as a fraction of the image size.
    pub radius: f64,
}

impl Texture {
    pub fn for_region(region: BodyRegion) -> Texture {
        let k = region.canonical_index();
        Texture {
            frequency: 1.0 + (k % 4) as f64 * 0.5,
            angle_deg: (k * 47 % 180) as f64,
            radius: 0.22 + (k % 5) as f64 * 0.05,
        }
    }
}

fn default_spacing() -> f64 {
    2.0
}
fn default_noise() -> f64 {
    0.05
}
fn default_studies() -> usize {
    1
}
fn default_modality() -> Modality {
    Modality::Ct
}
fn default_size() -> u16 {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub regions: Vec<PhantomRegion>,
    #[serde(default = "default_spacing")]
    pub slice_spacing_mm: f64,
    /// Uniform noise amplitude relative to the texture amplitude.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_studies")]
    pub studies: usize,
    /// Consecutive regions per study, all of them when absent.
    #[serde(default)]
    pub regions_per_study: Option<usize>,
    #[serde(default = "default_modality")]
    pub modality: Modality,
    /// Rows and columns of every image.
    #[serde(default = "default_size")]
    pub size: u16,
    /// Encode pixels with RLE Lossless instead of native little endian.
    #[serde(default)]
    pub rle: bool,
}

impl PhantomSpec {
    pub fn new(regions: &[(BodyRegion, f64)], seed: u64) -> Self {
        PhantomSpec {
            regions: regions
                .iter()
                .map(|&(region, extent_mm)| PhantomRegion {
                    region,
                    extent_mm,
                    texture: None,
                })
                .collect(),
            slice_spacing_mm: default_spacing(),
            noise: default_noise(),
            seed,
            studies: default_studies(),
            regions_per_study: None,
            modality: default_modality(),
            size: default_size(),
            rle: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("I/O error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// What was written, with the construction-time label of every image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhantomSummary {
    pub studies: usize,
    pub series: usize,
    pub images: usize,
    pub boxes: Vec<BoundingBox3D>,
    /// (SOP instance UID, region) in generation order.
    pub truth: Vec<(String, BodyRegion)>,
    pub files: Vec<PathBuf>,
}

fn invalid(msg: impl Into<String>) -> PhantomError {
    PhantomError::InvalidSpec(msg.into())
}

/// Checks the spec and returns its regions in canonical order.
pub fn validate(spec: &PhantomSpec) -> Result<Vec<PhantomRegion>, PhantomError> {
    if spec.regions.is_empty() {
        return Err(invalid("no regions"));
    }
    let mut seen = HashSet::new();
    for r in &spec.regions {
        if r.region == BodyRegion::AbdomenChest {
            return Err(invalid("AbdomenChest is not an output region"));
        }
        if !seen.insert(r.region) {
            return Err(invalid(format!("region {} listed twice", r.region)));
        }
        if !(r.extent_mm > 0.0 && r.extent_mm.is_finite()) {
            return Err(invalid(format!("region {} has extent {} mm", r.region, r.extent_mm)));
        }
    }
    if !(spec.slice_spacing_mm > 0.0 && spec.slice_spacing_mm.is_finite()) {
        return Err(invalid("slice spacing must be positive"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(invalid("noise must be non-negative"));
    }
    if spec.studies == 0 {
        return Err(invalid("at least one study is required"));
    }
    if spec.size < 32 {
        return Err(invalid("images must be at least 32 pixels wide"));
    }
    if !matches!(spec.modality, Modality::Ct | Modality::Mr) {
        return Err(invalid("modality must be CT or MR"));
    }
    if let Some(n) = spec.regions_per_study {
        if n == 0 || n > spec.regions.len() {
            return Err(invalid(format!("regions_per_study must lie in 1..={}", spec.regions.len())));
        }
    }
    let mut regions = spec.regions.clone();
    regions.sort_by_key(|r| r.region);
    Ok(regions)
}

fn uid(rng: &mut ChaCha8Rng) -> String {
    // 2.25 root: a 122-bit random integer rendered as a UUID-derived UID
    let v: u128 = rng.random::<u128>() >> 6;
    format!("2.25.{v}")
}

/// Per-study acquisition parameters.
struct StudyParams {
    study_uid: String,
    series_uid: String,
    frame_uid: String,
    patient_id: String,
    z0: f64,
    shift: (f64, f64),
    gain: f64,
    age: u32,
    sex: &'static str,
    manufacturer: &'static str,
    institution: &'static str,
    contrast: bool,
    /// 0: defined term of the first region, 1: missing, 2: free text.
    body_part_style: u8,
}

fn study_params(seed: u64, index: usize) -> (StudyParams, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    const MANUFACTURERS: [&str; 4] = ["SIEMENS", "GE MEDICAL SYSTEMS", "Philips", "TOSHIBA"];
    const INSTITUTIONS: [&str; 3] = ["Primary Care Hospital", "Community Hospital", "Imaging Center"];
    let params = StudyParams {
        study_uid: uid(&mut rng),
        series_uid: uid(&mut rng),
        frame_uid: uid(&mut rng),
        patient_id: format!("PHANTOM{index:05}"),
        z0: -400.0 + rng.random_range(0..200) as f64,
        shift: (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
        gain: rng.random_range(0.9..1.1),
        age: rng.random_range(18..95),
        sex: if rng.random::<bool>() { "F" } else { "M" },
        manufacturer: MANUFACTURERS[rng.random_range(0..MANUFACTURERS.len())],
        institution: INSTITUTIONS[rng.random_range(0..INSTITUTIONS.len())],
        contrast: rng.random::<f64>() < 0.3,
        body_part_style: match rng.random::<f64>() {
            x if x < 0.8 => 0,
            x if x < 0.9 => 1,
            _ => 2,
        },
    };
    (params, rng)
}

fn render(texture: &Texture, size: usize, params: &StudyParams, noise: f64, rng: &mut ChaCha8Rng) -> Vec<i64> {
    let n = size as f64;
    let (sin, cos) = texture.angle_deg.to_radians().sin_cos();
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let x = (c as f64 + 0.5 - n / 2.0 - params.shift.0) / n;
            let y = (r as f64 + 0.5 - n / 2.0 - params.shift.1) / n;
            let inside = (x * x + y * y).sqrt() < texture.radius;
            let stripes = (std::f64::consts::TAU * texture.frequency * (x * cos + y * sin)).sin();
            let signal = if inside { 800.0 + 600.0 * stripes } else { 0.0 };
            let jitter = if noise > 0.0 { rng.random_range(-1.0..1.0) * noise * 600.0 } else { 0.0 };
            let v = 1000.0 + params.gain * signal + jitter;
            out.push(v.round().clamp(0.0, MAX_VALUE) as i64);
        }
    }
    out
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PhantomError + '_ {
    move |source| PhantomError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `<out>/dicom/study_NNN/series_0/img_NNNN.dcm`, `<out>/labels.json`
/// and `<out>/truth.csv`. Output depends only on the spec.
pub fn generate_phantom(spec: &PhantomSpec, out: &Path) -> Result<PhantomSummary, PhantomError> {
    let regions = validate(spec)?;
    let per_study = spec.regions_per_study.unwrap_or(regions.len());
    let windows = regions.len() - per_study + 1;
    let size = usize::from(spec.size);
    let (sop_class, description) = match spec.modality {
        Modality::Mr => (MR_IMAGE_STORAGE, "AX T2 TSE"),
        _ => (CT_IMAGE_STORAGE, "AX 2.0 SOFT TISSUE"),
    };
    let dicom_root = out.join("dicom");
    let mut summary = PhantomSummary {
        studies: spec.studies,
        series: spec.studies,
        images: 0,
        boxes: Vec::new(),
        truth: Vec::new(),
        files: Vec::new(),
    };

    for s in 0..spec.studies {
        let (params, mut rng) = study_params(spec.seed, s);
        let window = &regions[s % windows..s % windows + per_study];
        let total: f64 = window.iter().map(|r| r.extent_mm).sum();
        let mut bounds = Vec::with_capacity(window.len());
        let mut start = 0.0;
        for r in window {
            bounds.push((start, start + r.extent_mm));
            summary.boxes.push(BoundingBox3D {
                frame_of_reference_uid: params.frame_uid.clone(),
                region: r.region,
                min_corner: [-BOX_HALF_WIDTH, -BOX_HALF_WIDTH, params.z0 + start],
                max_corner: [BOX_HALF_WIDTH, BOX_HALF_WIDTH, params.z0 + start + r.extent_mm],
            });
            start += r.extent_mm;
        }
        let dir = dicom_root.join(format!("study_{s:03}")).join("series_0");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;

        let slices = ((total / spec.slice_spacing_mm) - 1e-9).ceil() as usize;
        for i in 0..slices {
            let offset = i as f64 * spec.slice_spacing_mm;
            let k = bounds.iter().position(|&(lo, hi)| lo <= offset && offset < hi).unwrap_or(window.len() - 1);
            let region = &window[k];
            let texture = region.texture.unwrap_or_else(|| Texture::for_region(region.region));
            let samples = render(&texture, size, &params, spec.noise, &mut rng);
            let sop_uid = uid(&mut rng);

            let syntax = if spec.rle { ts::RLE_LOSSLESS } else { ts::EXPLICIT_VR_LE };
            let mut w = DicomWriter::with_transfer_syntax(&sop_uid, syntax);
            w.put(tags::SOP_CLASS_UID, Value::ui(sop_class))
                .put(tags::MODALITY, Value::cs(spec.modality.as_str()))
                .put(tags::MANUFACTURER, Value::lo(params.manufacturer))
                .put(tags::INSTITUTION_NAME, Value::lo(params.institution))
                .put(tags::STUDY_DESCRIPTION, Value::lo(&format!("{} PHANTOM", window[0].region.dicom_body_part())))
                .put(tags::SERIES_DESCRIPTION, Value::lo(description))
                .put(tags::PATIENT_ID, Value::lo(&params.patient_id))
                .put(tags::PATIENT_SEX, Value::cs(params.sex))
                .put(tags::PATIENT_AGE, Value::as_age(params.age))
                .put(tags::SLICE_THICKNESS, Value::ds(&[spec.slice_spacing_mm]))
                .put(tags::STUDY_INSTANCE_UID, Value::ui(&params.study_uid))
                .put(tags::SERIES_INSTANCE_UID, Value::ui(&params.series_uid))
                .put(tags::INSTANCE_NUMBER, Value::is(i as i64 + 1))
                .put(tags::IMAGE_POSITION_PATIENT, Value::ds(&[-(size as f64) / 2.0, -(size as f64) / 2.0, params.z0 + offset]))
                .put(tags::IMAGE_ORIENTATION_PATIENT, Value::ds(&AXIAL))
                .put(tags::FRAME_OF_REFERENCE_UID, Value::ui(&params.frame_uid))
                .put(tags::SAMPLES_PER_PIXEL, Value::Us(1))
                .put(tags::ROWS, Value::Us(spec.size))
                .put(tags::COLUMNS, Value::Us(spec.size))
                .put(tags::BITS_ALLOCATED, Value::Us(16))
                .put(tags::BITS_STORED, Value::Us(BITS_STORED))
                .put(tags::PIXEL_REPRESENTATION, Value::Us(0));
            match spec.modality {
                Modality::Mr => {
                    w.put(tags::SCANNING_SEQUENCE, Value::cs("SE"));
                }
                _ => {
                    w.put(tags::CONVOLUTION_KERNEL, Value::sh("B30f"));
                }
            }
            match params.body_part_style {
                0 => {
                    w.put(tags::BODY_PART_EXAMINED, Value::cs(window[0].region.dicom_body_part()));
                }
                1 => {}
                _ => {
                    w.put(tags::BODY_PART_EXAMINED, Value::cs("UNSPECIFIED"));
                }
            }
            if params.contrast {
                w.put(tags::CONTRAST_BOLUS_AGENT, Value::lo("IODINE"));
            }
            if spec.rle {
                w.put_encapsulated_pixels(vec![rle_encode_frame(&samples, 2)]);
            } else {
                w.put_native_pixels(samples.iter().flat_map(|v| (*v as u16).to_le_bytes()).collect());
            }
            let path = dir.join(format!("img_{:04}.dcm", i + 1));
            fs::write(&path, w.to_part10()).map_err(io_err(&path))?;
            summary.files.push(path);
            summary.truth.push((sop_uid, region.region));
            summary.images += 1;
        }
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let labels = out.join("labels.json");
    write_label_file(&labels, &summary.boxes).map_err(io_err(&labels))?;
    let truth = out.join("truth.csv");
    let file = fs::File::create(&truth).map_err(io_err(&truth))?;
    write_truth_csv(&summary.truth, file).map_err(|e| io_err(&truth)(std::io::Error::other(e)))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use BodyRegion::*;

    #[test]
    fn three_region_counts() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::new(&[(Head, 60.0), (Neck, 60.0), (Chest, 60.0)], 1);
        let s = generate_phantom(&spec, dir.path()).unwrap();
        assert_eq!(s.images, 90);
        assert_eq!(s.boxes.len(), 3);
        let counts = |r| s.truth.iter().filter(|(_, t)| *t == r).count();
        assert_eq!((counts(Chest), counts(Head), counts(Neck)), (30, 30, 30));
        assert!(dir.path().join("labels.json").exists());
    }

    #[test]
    fn invalid_specs() {
        let dir = tempfile::tempdir().unwrap();
        let zero = PhantomSpec::new(&[(Head, 0.0)], 1);
        assert!(matches!(generate_phantom(&zero, dir.path()), Err(PhantomError::InvalidSpec(_))));
        let dup = PhantomSpec::new(&[(Head, 10.0), (Head, 10.0)], 1);
        assert!(matches!(validate(&dup), Err(PhantomError::InvalidSpec(_))));
        let mut window = PhantomSpec::new(&[(Head, 10.0)], 1);
        window.regions_per_study = Some(2);
        assert!(matches!(validate(&window), Err(PhantomError::InvalidSpec(_))));
    }

    #[test]
    fn deterministic_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut spec = PhantomSpec::new(&[(Knee, 10.0), (Thigh, 10.0)], 42);
        spec.studies = 2;
        spec.rle = true;
        let sa = generate_phantom(&spec, a.path()).unwrap();
        let sb = generate_phantom(&spec, b.path()).unwrap();
        assert_eq!(sa.truth, sb.truth);
        for (fa, fb) in sa.files.iter().zip(&sb.files) {
            assert_eq!(fs::read(fa).unwrap(), fs::read(fb).unwrap());
        }
        assert_eq!(fs::read(a.path().join("labels.json")).unwrap(), fs::read(b.path().join("labels.json")).unwrap());
    }
}
