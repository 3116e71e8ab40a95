//! Fairness-aware cross-domain recommendation.
//!
//! A matrix-factorisation backbone shares user knowledge between a source and
//! a target domain. Users present only in the target domain get a generated
//! ("virtual") source embedding from a dual-attention generator trained
//! against overlapping users, which narrows the accuracy gap between the two
//! user groups.

pub mod cdr;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod infolab;
pub mod limiter;
pub mod linalg;
pub mod metrics;
pub mod params;
pub mod report;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
