//! Layered compaction-field estimation from roller measurement values.
//!
//! The crate fits a sequential spatial mixed-effects model to per-layer roller
//! data (generalized least squares for the covariates, kriging for the
//! spatial fields, alternated until they agree), draws posterior samples of
//! the estimated process-level fields, and runs a multiresolution scale-space
//! analysis that marks credibly soft and hard regions at each smoothing level.

pub mod backfit;
pub mod config;
pub mod covariance;
pub mod error;
pub mod field_model;
pub mod gridio;
pub mod pipeline;
pub mod posterior;
pub mod render;
pub mod scalespace;
pub mod simulate;

pub use error::{Error, Result};
