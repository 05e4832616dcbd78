//! Per-image intensity normalization, letterbox resize, channel replication
//! and random affine augmentation.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::PixelMatrix;

pub const INPUT_SIZE: usize = 224;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PreprocessError {
    #[error("image has no pixels")]
    EmptyImage,
    #[error("augmentation parameter out of range: {0}")]
    ParamsOutOfRange(String),
}

/// Network-ready single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub values: Array2<f64>,
    pub source_sop_uid: String,
    pub original_shape: (usize, usize),
}

/// Clips to mean ± 4·std and maps to (x − mean) / (2·std), so the result
/// lies in [−2, 2]. Mean and population std are taken once from the raw
/// pixels. A (numerically) constant image maps to zeros.
pub fn clip_normalize(pixels: &PixelMatrix) -> Result<Array2<f64>, PreprocessError> {
    clip_normalize_real(&pixels.mapv(|v| v as f64))
}

pub fn clip_normalize_real(values: &Array2<f64>) -> Result<Array2<f64>, PreprocessError> {
    if values.is_empty() {
        return Err(PreprocessError::EmptyImage);
    }
    let n = values.len() as f64;
    let mean = values.sum() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return Ok(Array2::zeros(values.raw_dim()));
    }
    let (lo, hi) = (mean - 4.0 * std, mean + 4.0 * std);
    Ok(values.mapv(|v| ((v.clamp(lo, hi) - mean) / (2.0 * std)).clamp(-2.0, 2.0)))
}

/// Bilinear resample to `out_rows × out_cols` with half-pixel centers
/// (align-corners off), edge samples clamped.
pub fn resize_bilinear(values: &Array2<f64>, out_rows: usize, out_cols: usize) -> Array2<f64> {
    let (rows, cols) = values.dim();
    let src_coord = |d: usize, inp: usize, out: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let ys: Vec<_> = (0..out_rows).map(|r| src_coord(r, rows, out_rows)).collect();
    let xs: Vec<_> = (0..out_cols).map(|c| src_coord(c, cols, out_cols)).collect();
    Array2::from_shape_fn((out_rows, out_cols), |(r, c)| {
        let (y0, y1, fy) = ys[r];
        let (x0, x1, fx) = xs[c];
        let top = values[[y0, x0]] * (1.0 - fx) + values[[y0, x1]] * fx;
        let bottom = values[[y1, x0]] * (1.0 - fx) + values[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Scales the longer side to `target` preserving aspect ratio, then centers
/// the content on a zero `target × target` canvas.
pub fn resize_pad(values: &Array2<f64>, target: usize) -> Result<Array2<f64>, PreprocessError> {
    let (rows, cols) = values.dim();
    if rows == 0 || cols == 0 || target == 0 {
        return Err(PreprocessError::EmptyImage);
    }
    let scale = target as f64 / rows.max(cols) as f64;
    let new_rows = ((rows as f64 * scale).round() as usize).clamp(1, target);
    let new_cols = ((cols as f64 * scale).round() as usize).clamp(1, target);
    let content = if (new_rows, new_cols) == (rows, cols) {
        values.clone()
    } else {
        resize_bilinear(values, new_rows, new_cols)
    };
    let top = (target - new_rows) / 2;
    let left = (target - new_cols) / 2;
    let mut out = Array2::zeros((target, target));
    out.slice_mut(ndarray::s![top..top + new_rows, left..left + new_cols])
        .assign(&content);
    Ok(out)
}

/// Replicates one channel into a (3, rows, cols) tensor.
pub fn to_three_channel(values: &Array2<f64>) -> Array3<f64> {
    let view = values.view().insert_axis(Axis(0));
    ndarray::concatenate(Axis(0), &[view, view, view]).expect("identical shapes")
}

/// Full chain for one image: normalize, then letterbox to `target`.
pub fn preprocess(sop_uid: &str, pixels: &PixelMatrix, target: usize) -> Result<NormalizedImage, PreprocessError> {
    let normalized = clip_normalize(pixels)?;
    Ok(NormalizedImage {
        values: resize_pad(&normalized, target)?,
        source_sop_uid: sop_uid.to_string(),
        original_shape: pixels.dim(),
    })
}

/// Upper bounds for random augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentRanges {
    /// Radians.
    pub rotation: f64,
    /// Fraction of image size.
    pub translate: f64,
    pub shear: f64,
    /// Relative zoom.
    pub scale: f64,
}

impl AugmentRanges {
    pub const MAX: AugmentRanges = AugmentRanges {
        rotation: PI / 10.0,
        translate: 0.1,
        shear: 0.1,
        scale: 0.2,
    };

    fn validate(&self) -> Result<(), PreprocessError> {
        let checks = [
            ("rotation", self.rotation, Self::MAX.rotation),
            ("translate", self.translate, Self::MAX.translate),
            ("shear", self.shear, Self::MAX.shear),
            ("scale", self.scale, Self::MAX.scale),
        ];
        for (name, v, max) in checks {
            if !(v.is_finite() && v.abs() <= max + 1e-12) {
                return Err(PreprocessError::ParamsOutOfRange(format!("{name} {v} exceeds {max}")));
            }
        }
        Ok(())
    }
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self::MAX
    }
}

/// One concrete affine transform.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation: f64,
    pub translate_x: f64,
    pub translate_y: f64,
    pub shear: f64,
    pub scale: f64,
}

impl AffineParams {
    pub fn sample(ranges: &AugmentRanges, rng: &mut impl Rng) -> Result<Self, PreprocessError> {
        ranges.validate()?;
        let mut draw = |bound: f64| if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 };
        Ok(AffineParams {
            rotation: draw(ranges.rotation),
            translate_x: draw(ranges.translate),
            translate_y: draw(ranges.translate),
            shear: draw(ranges.shear),
            scale: draw(ranges.scale),
        })
    }

    fn validate(&self) -> Result<(), PreprocessError> {
        AugmentRanges {
            rotation: self.rotation,
            translate: self.translate_x.abs().max(self.translate_y.abs()),
            shear: self.shear,
            scale: self.scale,
        }
        .validate()
    }
}

/// Warps the image by a single affine map about its center:
/// zoom (1 + scale), then horizontal shear, then rotation, then translation.
/// Output pixels are bilinearly sampled through the inverse map; samples
/// outside the source read as zero.
pub fn augment(values: &Array2<f64>, params: &AffineParams) -> Result<Array2<f64>, PreprocessError> {
    params.validate()?;
    let (rows, cols) = values.dim();
    if rows == 0 || cols == 0 {
        return Err(PreprocessError::EmptyImage);
    }
    let z = 1.0 + params.scale;
    let (s, c) = params.rotation.sin_cos();
    let k = params.shear;
    // forward matrix R · Shear · zoom acting on (x, y) = (col, row)
    let a = [[z * c, z * (c * k - s)], [z * s, z * (s * k + c)]];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let cx = (cols as f64 - 1.0) / 2.0;
    let cy = (rows as f64 - 1.0) / 2.0;
    let tx = params.translate_x * cols as f64;
    let ty = params.translate_y * rows as f64;
    let at = |r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= rows as isize || col >= cols as isize {
            0.0
        } else {
            values[[r as usize, col as usize]]
        }
    };
    Ok(Array2::from_shape_fn((rows, cols), |(r, col)| {
        let dx = col as f64 - cx - tx;
        let dy = r as f64 - cy - ty;
        let x = cx + inv[0][0] * dx + inv[0][1] * dy;
        let y = cy + inv[1][0] * dx + inv[1][1] * dy;
        if !(x > -1.0 && y > -1.0 && x < cols as f64 && y < rows as f64) {
            return 0.0;
        }
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
        let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// Samples parameters within `ranges` and applies them.
pub fn augment_random(
    values: &Array2<f64>,
    ranges: &AugmentRanges,
    rng: &mut impl Rng,
) -> Result<Array2<f64>, PreprocessError> {
    let params = AffineParams::sample(ranges, rng)?;
    augment(values, &params)
}
