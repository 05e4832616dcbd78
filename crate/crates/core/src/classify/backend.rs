use rayon::prelude::*;

use crate::preprocess::NormalizedImage;

use super::prediction::{Prediction, PredictionError};
use super::region::ClassSet;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClassifyError {
    #[error("backend failure: {0}")]
    BackendFailure(String),
    #[error("backend returned an invalid prediction for {sop_uid}: {source}")]
    InvalidPrediction { sop_uid: String, source: PredictionError },
}

/// A per-image classifier.
///
/// Backends return raw probability vectors over [`Backend::classes`]; the
/// caller validates them, so a misbehaving backend cannot produce an invalid
/// [`Prediction`].
pub trait Backend: Send + Sync {
    fn classes(&self) -> &ClassSet;

    /// Whether `classify_batch` may run concurrently on several threads.
    fn thread_safe(&self) -> bool {
        true
    }

    /// Whether inputs must carry pixel values. Lookup backends keyed by
    /// SOP instance UID do not.
    fn needs_pixels(&self) -> bool {
        true
    }

    fn prepare(&mut self) -> Result<(), ClassifyError> {
        Ok(())
    }

    fn classify_batch(&self, images: &[NormalizedImage]) -> Result<Vec<Vec<f64>>, ClassifyError>;
}

fn to_predictions(
    backend: &dyn Backend,
    images: &[NormalizedImage],
    vectors: Vec<Vec<f64>>,
) -> Result<Vec<Prediction>, ClassifyError> {
    if vectors.len() != images.len() {
        return Err(ClassifyError::BackendFailure(format!(
            "{} results for {} images",
            vectors.len(),
            images.len()
        )));
    }
    images
        .iter()
        .zip(vectors)
        .map(|(im, v)| {
            Prediction::new(im.source_sop_uid.clone(), backend.classes().clone(), v).map_err(|source| {
                ClassifyError::InvalidPrediction {
                    sop_uid: im.source_sop_uid.clone(),
                    source,
                }
            })
        })
        .collect()
}

pub fn classify_image(image: &NormalizedImage, backend: &dyn Backend) -> Result<Prediction, ClassifyError> {
    let images = std::slice::from_ref(image);
    let vectors = backend.classify_batch(images)?;
    Ok(to_predictions(backend, images, vectors)?.remove(0))
}

/// Classifies images in batches, in parallel when the backend allows it.
/// Output order matches input order.
pub fn classify_images(
    images: &[NormalizedImage],
    backend: &dyn Backend,
    batch_size: usize,
) -> Result<Vec<Prediction>, ClassifyError> {
    let batch_size = batch_size.max(1);
    let run = |chunk: &[NormalizedImage]| -> Result<Vec<Prediction>, ClassifyError> {
        let vectors = backend.classify_batch(chunk)?;
        to_predictions(backend, chunk, vectors)
    };
    let batches: Vec<Vec<Prediction>> = if backend.thread_safe() {
        images.par_chunks(batch_size).map(run).collect::<Result<_, _>>()?
    } else {
        images.chunks(batch_size).map(run).collect::<Result<_, _>>()?
    };
    Ok(batches.into_iter().flatten().collect())
}
