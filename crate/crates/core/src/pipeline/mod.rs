//! On-disk run layout: configuration, manifest, tensor blobs and stages.

pub mod blob;
pub mod config;
pub mod manifest;
pub mod stages;
pub mod store;

pub use config::{Preset, RunConfig, OUT_DIR_ENV};
pub use manifest::{Artifact, Manifest, StageEntry};
pub use stages::{verify, AnalysisSummary, Pipeline, Report, ReportRow, REPORT_METHODS};
