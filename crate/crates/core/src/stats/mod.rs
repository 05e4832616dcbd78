//! Evaluation statistics.

pub mod agreement;
pub mod bootstrap;
pub mod chisq;
pub mod confusion;
pub mod evaluation;
pub mod factors;
pub mod sample_size;

pub use agreement::{study_predictions, tag_agreement, SynonymError, SynonymMap, TagAgreement, TagKind};
pub use bootstrap::{
    bootstrap_ci, bootstrap_many, jackknife, weighted_sensitivity_metric, weighted_specificity_metric, BootstrapConfig,
    BootstrapError, CIResult, Jackknife, Metric,
};
pub use chisq::{chi_square, chi_square_sf, cramers_v, Association, ChiSquare, ChiSquareError, FactorTable};
pub use confusion::{ConfusionError, ConfusionMatrix, Specificity};
pub use evaluation::{build_eval_cohort, EvalCohort, EvalImage, EvalSeries, EvalStudy};
pub use factors::{factor_report, CategoryRow, Factor, FactorConfig, FactorError, FactorReport};
pub use sample_size::{implied_design_effect, sample_size, sample_size_raw, SampleSizeError};
