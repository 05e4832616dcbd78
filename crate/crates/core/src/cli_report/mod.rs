//! Command-line pipeline pieces: configuration, synthetic cohorts, report
//! rendering, tag write-back and the end-to-end run.

pub mod config;
pub mod files;
pub mod phantom;
pub mod pipeline;
pub mod report;
pub mod tagwrite;

pub use config::{BackendKind, ConfigError, Overrides, PipelineConfig};
pub use phantom::{generate_phantom, PhantomError, PhantomSpec, PhantomSummary};
pub use pipeline::{run_all, Evaluation, PipelineError, RunSummary};
pub use report::{emit_report, ReportData};
pub use tagwrite::{write_body_part_tags, TagAction, TagChange};
