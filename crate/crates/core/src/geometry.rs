//! Slice-plane geometry: orientation, physical positions, fixed-distance
//! subsampling and projection of 3-D label boxes onto images.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classify::BodyRegion;
use crate::ingest::{ImageRecord, SeriesRecord};

const UNIT_TOLERANCE: f64 = 1e-3;
/// Slack for comparisons against configured physical thresholds, so values
/// that are exact in decimal (45°, 10 mm) survive floating-point round-off.
const BOUND_EPS: f64 = 1e-6;

pub const AXIAL: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("degenerate orientation {0:?}: direction cosines must be unit length and orthogonal")]
    DegenerateOrientation([f64; 6]),
    #[error("series is empty")]
    EmptySeries,
    #[error("series {0} has neither positions nor a slice thickness")]
    MissingGeometry(String),
    #[error("invalid box for {region}: min corner exceeds max corner")]
    InvalidBox { region: BodyRegion },
    #[error("step must be positive, got {0}")]
    InvalidStep(f64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GeometryWarning {
    MissingOrientation { series_uid: String },
    FrameOfReferenceMismatch { series_uid: String, series_frame: Option<String> },
}

impl fmt::Display for GeometryWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryWarning::MissingOrientation { series_uid } => {
                write!(f, "series {series_uid}: no orientation, assuming axial")
            }
            GeometryWarning::FrameOfReferenceMismatch { series_uid, series_frame } => write!(
                f,
                "series {series_uid}: no label box shares frame of reference {}",
                series_frame.as_deref().unwrap_or("<none>")
            ),
        }
    }
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Unit normal of the image plane: row cosines × column cosines.
///
/// The sign follows the DICOM cross-product convention; callers that need a
/// sign-free quantity use the absolute z component.
pub fn slice_normal(orientation: &[f64; 6]) -> Result<[f64; 3], GeometryError> {
    let row = [orientation[0], orientation[1], orientation[2]];
    let col = [orientation[3], orientation[4], orientation[5]];
    let degenerate = || GeometryError::DegenerateOrientation(*orientation);
    if !orientation.iter().all(|v| v.is_finite())
        || (norm(&row) - 1.0).abs() > UNIT_TOLERANCE
        || (norm(&col) - 1.0).abs() > UNIT_TOLERANCE
        || dot(&row, &col).abs() > UNIT_TOLERANCE
    {
        return Err(degenerate());
    }
    let n = [
        row[1] * col[2] - row[2] * col[1],
        row[2] * col[0] - row[0] * col[2],
        row[0] * col[1] - row[1] * col[0],
    ];
    let len = norm(&n);
    if len == 0.0 {
        return Err(degenerate());
    }
    Ok([n[0] / len, n[1] / len, n[2] / len])
}

/// Angle in degrees between the slice normal and the patient z axis, in [0, 90].
pub fn axial_angle(orientation: &[f64; 6]) -> Result<f64, GeometryError> {
    let n = slice_normal(orientation)?;
    // atan2 form of acos(|n_z|); stays well conditioned near 0°
    Ok(n[0].hypot(n[1]).atan2(n[2].abs()).to_degrees())
}

/// Whether an angle is within `max_degrees` of axial, boundary included.
pub fn within_axial_limit(angle_degrees: f64, max_degrees: f64) -> bool {
    angle_degrees <= max_degrees + BOUND_EPS
}

/// Per-series slice positions measured along the slice normal.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceGeometry {
    pub normal: [f64; 3],
    /// Position of each image along the normal, in series order (mm).
    pub positions: Vec<f64>,
    /// Median gap between successive distinct positions (mm).
    pub spacing: Option<f64>,
}

fn series_normal(series: &SeriesRecord, warnings: &mut Vec<GeometryWarning>) -> Result<[f64; 3], GeometryError> {
    match series.images.iter().find_map(|i| i.image_orientation_patient) {
        Some(o) => slice_normal(&o),
        None => {
            warnings.push(GeometryWarning::MissingOrientation {
                series_uid: series.series_uid.clone(),
            });
            Ok([0.0, 0.0, 1.0])
        }
    }
}

/// Computes positions along the normal. Images without a position fall back
/// to `index × slice_thickness` for the whole series.
pub fn slice_geometry(series: &SeriesRecord) -> Result<(SliceGeometry, Vec<GeometryWarning>), GeometryError> {
    if series.images.is_empty() {
        return Err(GeometryError::EmptySeries);
    }
    let mut warnings = Vec::new();
    let have_positions = series.images.iter().all(|i| i.image_position_patient.is_some());
    let (normal, positions): ([f64; 3], Vec<f64>) = if have_positions {
        let normal = series_normal(series, &mut warnings)?;
        let positions = series
            .images
            .iter()
            .map(|i| dot(&i.image_position_patient.expect("checked above"), &normal))
            .collect();
        (normal, positions)
    } else {
        let thickness = series
            .slice_thickness
            .filter(|t| *t > 0.0)
            .ok_or_else(|| GeometryError::MissingGeometry(series.series_uid.clone()))?;
        let positions = (0..series.images.len()).map(|i| i as f64 * thickness).collect();
        ([0.0, 0.0, 1.0], positions)
    };
    let spacing = median_gap(&positions);
    Ok((
        SliceGeometry {
            normal,
            positions,
            spacing,
        },
        warnings,
    ))
}

fn median_gap(positions: &[f64]) -> Option<f64> {
    let mut sorted = positions.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup_by(|a, b| (*a - *b).abs() <= BOUND_EPS);
    let mut gaps: Vec<f64> = sorted.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_by(f64::total_cmp);
    let mid = gaps.len() / 2;
    Some(if gaps.len() % 2 == 1 {
        gaps[mid]
    } else {
        (gaps[mid - 1] + gaps[mid]) / 2.0
    })
}

/// Greedy fixed-distance selection from a given start.
///
/// `positions` need not be sorted; selection walks them in ascending order
/// from `start` (an index into `positions`) and keeps each image at least
/// `step` beyond the last kept one. Returned indices are in ascending
/// position order.
pub fn sample_from_start(positions: &[f64], step: f64, start: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by(|&a, &b| positions[a].total_cmp(&positions[b]).then(a.cmp(&b)));
    let Some(from) = order.iter().position(|&i| i == start) else {
        return Vec::new();
    };
    let mut selected = vec![start];
    let mut last = positions[start];
    for &i in &order[from + 1..] {
        if positions[i] - last >= step - BOUND_EPS {
            selected.push(i);
            last = positions[i];
        }
    }
    selected
}

/// Random start for [`sample_from_start`]: an offset drawn uniformly from
/// `[0, step)` past the first position, mapped to the last image at or
/// before that point. Equal offsets give starts that never move backwards
/// as `step` grows.
pub fn random_start(positions: &[f64], step: f64, rng: &mut impl Rng) -> Option<usize> {
    let u: f64 = rng.random();
    start_for_offset(positions, u * step)
}

fn start_for_offset(positions: &[f64], offset: f64) -> Option<usize> {
    let first = positions.iter().copied().min_by(f64::total_cmp)?;
    let target = first + offset;
    let mut best: Option<usize> = None;
    for (i, &p) in positions.iter().enumerate() {
        if p <= target + BOUND_EPS {
            best = match best {
                Some(b) if positions[b] > p || (positions[b] == p && b < i) => Some(b),
                _ => Some(i),
            };
        }
    }
    best
}

/// [`sample_from_start`] after [`random_start`] for positions already in
/// ascending order, with the uniform draw `u` in `[0, 1)` supplied by the
/// caller. Appends the kept indices to `out`.
pub fn sample_sorted(sorted: &[f64], step: f64, u: f64, out: &mut Vec<usize>) {
    let Some(&first) = sorted.first() else {
        return;
    };
    let target = first + u * step + BOUND_EPS;
    let last_le = sorted.partition_point(|p| *p <= target).max(1) - 1;
    let value = sorted[last_le];
    let start = sorted[..=last_le].partition_point(|p| *p < value);
    out.push(start);
    let mut last = value;
    for (i, &p) in sorted.iter().enumerate().skip(start + 1) {
        if p - last >= step - BOUND_EPS {
            out.push(i);
            last = p;
        }
    }
}

/// Subsamples a series so kept images are at least `step` mm apart.
/// Returns image indices in ascending position order.
pub fn sample_every_step(series: &SeriesRecord, step: f64, rng: &mut impl Rng) -> Result<Vec<usize>, GeometryError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(GeometryError::InvalidStep(step));
    }
    let (geometry, _) = slice_geometry(series)?;
    let start = random_start(&geometry.positions, step, rng).ok_or(GeometryError::EmptySeries)?;
    Ok(sample_from_start(&geometry.positions, step, start))
}

/// Axis-aligned ground-truth label volume in patient coordinates (mm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox3D {
    pub frame_of_reference_uid: String,
    pub region: BodyRegion,
    pub min_corner: [f64; 3],
    pub max_corner: [f64; 3],
}

impl BoundingBox3D {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = (0..3).all(|i| {
            self.min_corner[i].is_finite() && self.max_corner[i].is_finite() && self.min_corner[i] <= self.max_corner[i]
        });
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidBox { region: self.region })
        }
    }

    /// Interval covered by the box along `normal`.
    fn interval_along(&self, normal: &[f64; 3]) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for mask in 0..8u8 {
            let corner = [
                if mask & 1 == 0 { self.min_corner[0] } else { self.max_corner[0] },
                if mask & 2 == 0 { self.min_corner[1] } else { self.max_corner[1] },
                if mask & 4 == 0 { self.min_corner[2] } else { self.max_corner[2] },
            ];
            let d = dot(&corner, normal);
            lo = lo.min(d);
            hi = hi.max(d);
        }
        (lo, hi)
    }

    fn center(&self) -> [f64; 3] {
        [
            (self.min_corner[0] + self.max_corner[0]) / 2.0,
            (self.min_corner[1] + self.max_corner[1]) / 2.0,
            (self.min_corner[2] + self.max_corner[2]) / 2.0,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedLabels {
    /// One entry per image, in series order.
    pub labels: Vec<Option<BodyRegion>>,
    pub warnings: Vec<GeometryWarning>,
}

fn image_normal(image: &ImageRecord, fallback: [f64; 3]) -> Result<[f64; 3], GeometryError> {
    match &image.image_orientation_patient {
        Some(o) => slice_normal(o),
        None => Ok(fallback),
    }
}

/// Assigns each image the region of the box containing its plane point.
///
/// Containment is tested along the slice normal only: the box's extent
/// projected onto the normal must contain the image position, inclusive at
/// the low end and exclusive at the high end. When several boxes contain a
/// point the one whose projected center is nearest wins, then the
/// lexicographically smaller region name.
pub fn project_box_labels(boxes: &[BoundingBox3D], series: &SeriesRecord) -> Result<ProjectedLabels, GeometryError> {
    let mut warnings = Vec::new();
    if series.images.is_empty() {
        return Ok(ProjectedLabels {
            labels: Vec::new(),
            warnings,
        });
    }
    let fallback = series_normal(series, &mut warnings)?;
    let candidates: Vec<&BoundingBox3D> = boxes
        .iter()
        .filter(|b| Some(&b.frame_of_reference_uid) == series.frame_of_reference_uid.as_ref())
        .collect();
    if candidates.is_empty() && !boxes.is_empty() {
        warnings.push(GeometryWarning::FrameOfReferenceMismatch {
            series_uid: series.series_uid.clone(),
            series_frame: series.frame_of_reference_uid.clone(),
        });
    }
    let mut labels = Vec::with_capacity(series.images.len());
    for image in &series.images {
        let position = image
            .image_position_patient
            .ok_or_else(|| GeometryError::MissingGeometry(series.series_uid.clone()))?;
        let normal = image_normal(image, fallback)?;
        let s = dot(&position, &normal);
        let mut best: Option<(f64, &BoundingBox3D)> = None;
        for b in &candidates {
            let (lo, hi) = b.interval_along(&normal);
            if !(lo <= s && s < hi) {
                continue;
            }
            let distance = (dot(&b.center(), &normal) - s).abs();
            let better = match best {
                None => true,
                Some((d, cur)) => distance < d || (distance == d && b.region.name() < cur.region.name()),
            };
            if better {
                best = Some((distance, b));
            }
        }
        labels.push(best.map(|(_, b)| b.region));
    }
    Ok(ProjectedLabels { labels, warnings })
}

#[derive(Debug, thiserror::Error)]
pub enum LabelFileError {
    #[error("reading label file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing label file {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("label file {path}: {source}")]
    Invalid { path: String, source: GeometryError },
}

/// Reads a JSON array of boxes.
pub fn read_label_file(path: &Path) -> Result<Vec<BoundingBox3D>, LabelFileError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| LabelFileError::Io {
        path: shown.clone(),
        source,
    })?;
    let boxes: Vec<BoundingBox3D> = serde_json::from_str(&text).map_err(|source| LabelFileError::Parse {
        path: shown.clone(),
        source,
    })?;
    for b in &boxes {
        b.validate().map_err(|source| LabelFileError::Invalid {
            path: shown.clone(),
            source,
        })?;
    }
    Ok(boxes)
}

pub fn write_label_file(path: &Path, boxes: &[BoundingBox3D]) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(boxes).map_err(std::io::Error::other)?;
    text.push('\n');
    std::fs::write(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::Modality;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rotation_about_x(deg: f64) -> [f64; 6] {
        let t = deg.to_radians();
        // row stays along x; column cosine rotates within the y-z plane
        [1.0, 0.0, 0.0, 0.0, t.cos(), t.sin()]
    }

    fn series_at(positions: &[f64]) -> SeriesRecord {
        let mut s = SeriesRecord::new("1.2", Modality::Ct);
        s.frame_of_reference_uid = Some("for".into());
        for (i, z) in positions.iter().enumerate() {
            let mut im = ImageRecord::new(format!("1.2.{i}"), String::new());
            im.image_position_patient = Some([0.0, 0.0, *z]);
            im.image_orientation_patient = Some(AXIAL);
            s.images.push(im);
        }
        s
    }

    #[test]
    fn normals_of_standard_planes() {
        assert_eq!(slice_normal(&AXIAL).unwrap(), [0.0, 0.0, 1.0]);
        assert_eq!(slice_normal(&[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(), [1.0, 0.0, 0.0]);
        assert!(matches!(
            slice_normal(&[1.0, 0.0, 0.0, 0.0, 0.5, 0.5]),
            Err(GeometryError::DegenerateOrientation(_))
        ));
    }

    #[test]
    fn axial_angles() {
        assert_eq!(axial_angle(&AXIAL).unwrap(), 0.0);
        assert!((axial_angle(&[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap() - 90.0).abs() < 1e-12);
        let a = axial_angle(&rotation_about_x(45.0)).unwrap();
        assert!((a - 45.0).abs() < 1e-9);
        assert!(within_axial_limit(a, 45.0));
        assert!(!within_axial_limit(axial_angle(&rotation_about_x(60.0)).unwrap(), 45.0));
    }

    #[test]
    fn greedy_two_mm() {
        let positions: Vec<f64> = (0..50).map(|i| i as f64 * 2.0).collect();
        let picked = sample_from_start(&positions, 10.0, 0);
        assert_eq!(picked, (0..10).map(|k| k * 5).collect::<Vec<_>>());
    }

    #[test]
    fn wide_spacing_keeps_everything() {
        let s = series_at(&(0..8).map(|i| i as f64 * 12.0).collect::<Vec<_>>());
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(sample_every_step(&s, 10.0, &mut rng).unwrap(), (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn single_image_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_every_step(&series_at(&[5.0]), 10.0, &mut rng).unwrap(), vec![0]);
        assert_eq!(
            sample_every_step(&series_at(&[]), 10.0, &mut rng),
            Err(GeometryError::EmptySeries)
        );
    }

    #[test]
    fn thickness_fallback() {
        let mut s = series_at(&[0.0, 0.0, 0.0]);
        for im in &mut s.images {
            im.image_position_patient = None;
        }
        assert!(matches!(slice_geometry(&s), Err(GeometryError::MissingGeometry(_))));
        s.slice_thickness = Some(5.0);
        let (g, _) = slice_geometry(&s).unwrap();
        assert_eq!(g.positions, vec![0.0, 5.0, 10.0]);
        assert_eq!(g.spacing, Some(5.0));
    }

    fn bx(region: BodyRegion, z0: f64, z1: f64) -> BoundingBox3D {
        BoundingBox3D {
            frame_of_reference_uid: "for".into(),
            region,
            min_corner: [-100.0, -100.0, z0],
            max_corner: [100.0, 100.0, z1],
        }
    }

    #[test]
    fn containment_and_frame_mismatch() {
        let s = series_at(&[50.0, 150.0, 100.0, 0.0]);
        let boxes = vec![bx(BodyRegion::Chest, 0.0, 100.0)];
        let p = project_box_labels(&boxes, &s).unwrap();
        assert_eq!(p.labels, vec![Some(BodyRegion::Chest), None, None, Some(BodyRegion::Chest)]);
        assert!(p.warnings.is_empty());

        let mut other = boxes.clone();
        other[0].frame_of_reference_uid = "elsewhere".into();
        let p = project_box_labels(&other, &s).unwrap();
        assert!(p.labels.iter().all(Option::is_none));
        assert!(matches!(p.warnings[0], GeometryWarning::FrameOfReferenceMismatch { .. }));
    }

    #[test]
    fn overlap_prefers_nearest_center_then_name() {
        let s = series_at(&[10.0, 50.0]);
        let boxes = vec![bx(BodyRegion::Pelvis, 0.0, 100.0), bx(BodyRegion::Abdomen, 0.0, 30.0)];
        let p = project_box_labels(&boxes, &s).unwrap();
        assert_eq!(p.labels, vec![Some(BodyRegion::Abdomen), Some(BodyRegion::Pelvis)]);
        let tie = vec![bx(BodyRegion::Pelvis, 0.0, 100.0), bx(BodyRegion::Chest, 0.0, 100.0)];
        assert_eq!(project_box_labels(&tie, &s).unwrap().labels[1], Some(BodyRegion::Chest));
    }

    proptest! {
        #[test]
        fn sorted_fast_path_matches_general(
            mut positions in proptest::collection::vec((0u32..400).prop_map(|v| v as f64 * 0.5), 1..60),
            step in 0.5f64..25.0,
            u in 0.0f64..1.0,
        ) {
            positions.sort_by(f64::total_cmp);
            let start = start_for_offset(&positions, u * step).unwrap();
            let expected = sample_from_start(&positions, step, start);
            let mut got = Vec::new();
            sample_sorted(&positions, step, u, &mut got);
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn in_plane_rotation_keeps_axial_angle(tilt in 0.0f64..90.0, spin in 0.0f64..360.0) {
            let o = rotation_about_x(tilt);
            let row = [o[0], o[1], o[2]];
            let col = [o[3], o[4], o[5]];
            let (c, s) = (spin.to_radians().cos(), spin.to_radians().sin());
            let r2: Vec<f64> = (0..3).map(|i| c * row[i] + s * col[i]).collect();
            let c2: Vec<f64> = (0..3).map(|i| -s * row[i] + c * col[i]).collect();
            let rotated = [r2[0], r2[1], r2[2], c2[0], c2[1], c2[2]];
            let a = axial_angle(&o).unwrap();
            let b = axial_angle(&rotated).unwrap();
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }

        #[test]
        fn larger_step_never_selects_more(
            gaps in proptest::collection::vec(0.0f64..8.0, 0..60),
            s1 in 0.5f64..20.0,
            extra in 0.0f64..20.0,
            seed in any::<u64>(),
        ) {
            let mut z = 0.0;
            let mut positions = vec![0.0];
            for g in gaps { z += g; positions.push(z); }
            let s = series_at(&positions);
            let a = sample_every_step(&s, s1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = sample_every_step(&s, s1 + extra, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!(!a.is_empty() && !b.is_empty());
            prop_assert!(b.len() <= a.len());
            for w in a.windows(2) {
                prop_assert!(positions[w[1]] - positions[w[0]] >= s1 - 1e-6);
            }
        }

        #[test]
        fn projection_ignores_image_order(mut zs in proptest::collection::vec(-50.0f64..250.0, 1..30), cut in 0.0f64..200.0) {
            let boxes = vec![bx(BodyRegion::Chest, 0.0, cut), bx(BodyRegion::Abdomen, cut, 200.0)];
            let s = series_at(&zs);
            let p = project_box_labels(&boxes, &s).unwrap();
            let mut pairs: Vec<(f64, Option<BodyRegion>)> = zs.iter().copied().zip(p.labels.clone()).collect();
            zs.reverse();
            let r = project_box_labels(&boxes, &series_at(&zs)).unwrap();
            let mut rpairs: Vec<(f64, Option<BodyRegion>)> = zs.iter().copied().zip(r.labels).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            rpairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            prop_assert_eq!(pairs, rpairs);
            prop_assert_eq!(project_box_labels(&boxes, &s).unwrap().labels, p.labels);
        }
    }
}
