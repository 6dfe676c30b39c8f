//! Pairwise speech-naturalness preference collection, aggregation, dataset
//! curation and judge benchmarking.

pub mod analytics;
pub mod annotation;
pub mod cli;
pub mod judge;
pub mod mock;
pub mod model;
pub mod pipeline;
pub mod report;
