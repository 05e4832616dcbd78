//! Body-region classification pipeline for CT and MR series.

pub mod classify;
pub mod cli_report;
pub mod cohort;
pub mod geometry;
pub mod ingest;
pub mod postprocess;
pub mod preprocess;
pub mod stats;
