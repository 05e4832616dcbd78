//! Body-region taxonomy, predictions and classifier backends.

pub mod backend;
pub mod centroid;
pub mod prediction;
pub mod region;
pub mod scores;

pub use backend::{classify_image, classify_images, Backend, ClassifyError};
pub use centroid::{train_centroid_baseline, CentroidBackend, CentroidError};
pub use prediction::{softmax, Prediction, PredictionError};
pub use region::{BodyRegion, ClassSet, ClassSetError, Modality, UnknownRegion};
pub use scores::{load_scores, write_scores, ScoreTable, ScoresError};
