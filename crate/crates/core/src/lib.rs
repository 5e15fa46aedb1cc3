//! Multi-stream transformer for longitudinal claims data.
//!
//! Medication and diagnosis histories are encoded per stream by LSTMs,
//! mixed by within- and cross-stream attention, and classified together
//! with demographics. The crate also carries the surrounding pipeline:
//! claims preprocessing, cohort matching, synthetic cohorts, training,
//! metrics, and attention-graph export.

pub mod autodiff;
pub mod baselines;
pub mod claims;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod representation;
pub mod synthetic;
pub mod training;

pub use autodiff::{Graph, ParamStore, Tensor, Var};
pub use error::{Error, Result};
