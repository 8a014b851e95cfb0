//! Two-stage adaptive proof-of-concept dose-response tests.
//!
//! Candidate dose-response models are turned into optimal contrasts, combined
//! within each stage into a generalized multiple contrast test, and combined
//! across stages either through p-value combination or through the
//! conditional rejection probability principle.

pub mod adapt;
pub mod contrast;
pub mod crp;
pub mod data;
pub mod error;
pub mod fit;
pub mod gmct;
pub mod isotonic;
pub mod model;
pub mod mvdist;
pub mod rng;
pub mod score;

pub use error::{Error, FitError, Result};
