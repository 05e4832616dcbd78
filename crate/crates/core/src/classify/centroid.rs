//! Nearest-centroid baseline on 16×16 block-averaged images.

use std::collections::BTreeMap;

use crate::preprocess::NormalizedImage;

use super::backend::{Backend, ClassifyError};
use super::prediction::softmax;
use super::region::{BodyRegion, ClassSet};

pub const GRID: usize = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CentroidError {
    #[error("no training examples")]
    EmptyTrainingSet,
    #[error("no training examples for class {0}")]
    EmptyClass(BodyRegion),
    #[error("example labeled {0}, which is not in the class set")]
    UnknownClass(BodyRegion),
    #[error("image {0} has no pixels")]
    EmptyImage(String),
}

/// Mean of each cell of a GRID × GRID partition of the image. Cells of
/// images smaller than the grid reuse the nearest row or column.
pub fn block_features(image: &NormalizedImage) -> Option<Vec<f64>> {
    let (rows, cols) = image.values.dim();
    if rows == 0 || cols == 0 {
        return None;
    }
    let span = |i: usize, n: usize| {
        let start = (i * n / GRID).min(n - 1);
        let end = ((i + 1) * n / GRID).max(start + 1).min(n);
        start..end
    };
    let mut out = Vec::with_capacity(GRID * GRID);
    for br in 0..GRID {
        let rs = span(br, rows);
        for bc in 0..GRID {
            let cs = span(bc, cols);
            let block = image.values.slice(ndarray::s![rs.clone(), cs]);
            out.push(block.sum() / block.len() as f64);
        }
    }
    Some(out)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Per-class mean feature vectors. Immutable after training.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidBackend {
    classes: ClassSet,
    centroids: Vec<Vec<f64>>,
}

impl CentroidBackend {
    /// Trains over exactly `classes`; each needs at least one example.
    ///
    /// Feature vectors are summed in sorted order, so the model does not
    /// depend on the order of `examples`.
    pub fn train(examples: &[(NormalizedImage, BodyRegion)], classes: ClassSet) -> Result<Self, CentroidError> {
        let features = examples
            .iter()
            .map(|(image, region)| {
                block_features(image)
                    .map(|f| (f, *region))
                    .ok_or_else(|| CentroidError::EmptyImage(image.source_sop_uid.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_features(features, classes)
    }

    /// Trains from precomputed [`block_features`], so callers can stream
    /// images instead of holding them all in memory.
    pub fn from_features(examples: Vec<(Vec<f64>, BodyRegion)>, classes: ClassSet) -> Result<Self, CentroidError> {
        if examples.is_empty() {
            return Err(CentroidError::EmptyTrainingSet);
        }
        let mut per_class: BTreeMap<BodyRegion, Vec<Vec<f64>>> = BTreeMap::new();
        for (f, region) in examples {
            if !classes.contains(region) {
                return Err(CentroidError::UnknownClass(region));
            }
            per_class.entry(region).or_default().push(f);
        }
        let mut centroids = Vec::with_capacity(classes.len());
        for region in classes.iter() {
            let mut feats = per_class.remove(&region).ok_or(CentroidError::EmptyClass(region))?;
            feats.sort_by(|a, b| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let n = feats.len() as f64;
            let mut mean = vec![0.0; GRID * GRID];
            for f in &feats {
                for (m, v) in mean.iter_mut().zip(f) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            centroids.push(mean);
        }
        Ok(CentroidBackend { classes, centroids })
    }

    pub fn centroid(&self, region: BodyRegion) -> Option<&[f64]> {
        self.classes.index_of(region).map(|i| self.centroids[i].as_slice())
    }

    /// Softmax over negative Euclidean distances to each centroid.
    pub fn probabilities(&self, image: &NormalizedImage) -> Option<Vec<f64>> {
        let f = block_features(image)?;
        let scores: Vec<f64> = self.centroids.iter().map(|c| -distance(&f, c)).collect();
        Some(softmax(&scores))
    }
}

/// Trains on the classes present in `examples`.
pub fn train_centroid_baseline(examples: &[(NormalizedImage, BodyRegion)]) -> Result<CentroidBackend, CentroidError> {
    let mut regions: Vec<BodyRegion> = examples.iter().map(|(_, r)| *r).collect();
    regions.sort();
    regions.dedup();
    let classes = ClassSet::new(regions).map_err(|_| CentroidError::EmptyTrainingSet)?;
    CentroidBackend::train(examples, classes)
}

impl Backend for CentroidBackend {
    fn classes(&self) -> &ClassSet {
        &self.classes
    }

    fn classify_batch(&self, images: &[NormalizedImage]) -> Result<Vec<Vec<f64>>, ClassifyError> {
        images
            .iter()
            .map(|im| {
                self.probabilities(im)
                    .ok_or_else(|| ClassifyError::BackendFailure(format!("image {} has no pixels", im.source_sop_uid)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::backend::classify_image;
    use ndarray::Array2;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant(uid: &str, v: f64) -> NormalizedImage {
        NormalizedImage {
            values: Array2::from_elem((32, 32), v),
            source_sop_uid: uid.into(),
            original_shape: (32, 32),
        }
    }

    #[test]
    fn separates_constant_classes() {
        let examples = vec![
            (constant("a", -1.0), BodyRegion::Head),
            (constant("b", -0.9), BodyRegion::Head),
            (constant("c", 1.0), BodyRegion::Knee),
            (constant("d", 0.95), BodyRegion::Knee),
        ];
        let model = train_centroid_baseline(&examples).unwrap();
        let p = classify_image(&constant("x", -0.97), &model).unwrap();
        assert_eq!(p.label, BodyRegion::Head);
        assert!(p.margin > 0.9);
        let p = classify_image(&constant("y", 0.99), &model).unwrap();
        assert_eq!(p.label, BodyRegion::Knee);
        assert!(p.margin > 0.9);
    }

    #[test]
    fn single_class_always_wins() {
        let model = train_centroid_baseline(&[(constant("a", 0.3), BodyRegion::Neck)]).unwrap();
        for v in [-2.0, 0.0, 2.0] {
            assert_eq!(classify_image(&constant("x", v), &model).unwrap().label, BodyRegion::Neck);
        }
    }

    #[test]
    fn empty_training_set() {
        assert_eq!(train_centroid_baseline(&[]), Err(CentroidError::EmptyTrainingSet));
        let classes = ClassSet::new(vec![BodyRegion::Head, BodyRegion::Neck]).unwrap();
        assert_eq!(
            CentroidBackend::train(&[(constant("a", 0.0), BodyRegion::Head)], classes),
            Err(CentroidError::EmptyClass(BodyRegion::Neck))
        );
    }

    #[test]
    fn training_order_irrelevant() {
        let mut examples: Vec<(NormalizedImage, BodyRegion)> = (0..30)
            .map(|i| {
                let values = Array2::from_shape_fn((20, 24), |(r, c)| ((i * 7 + r * 3 + c) % 13) as f64 * 0.1 - 0.6);
                let img = NormalizedImage {
                    values,
                    source_sop_uid: format!("{i}"),
                    original_shape: (20, 24),
                };
                (img, if i % 3 == 0 { BodyRegion::Chest } else { BodyRegion::Pelvis })
            })
            .collect();
        let a = train_centroid_baseline(&examples).unwrap();
        examples.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        let b = train_centroid_baseline(&examples).unwrap();
        assert_eq!(a, b);
    }
}
