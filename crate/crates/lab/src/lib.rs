//! Experiment harness: configuration, synthetic corpora, sweep orchestration
//! and report emission.

pub mod config;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod report;

pub use error::{LabError, Result};
