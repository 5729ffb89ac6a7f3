//! On-disk formats: datasets, run configuration, evaluation reports and
//! SVG renderings.

pub mod dataset;
pub mod config;
pub mod report;
pub mod svg;
