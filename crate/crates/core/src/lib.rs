#![forbid(unsafe_code)]

//! Selective test-time inference for binary click-through-rate models.
//!
//! Given a frozen differentiable backbone, this crate estimates per-instance
//! uncertainty from two signals (logit confidence and a sketch-based frequency
//! prior), filters unreliable features per field, allocates a variable number
//! of stochastic feature-path explorations to uncertain instances, and
//! aggregates the resulting predictions by consistency weighting.
//!
//! Pipeline stages, each in its own module:
//!
//! - [`sketch`]: count-min frequency index over training feature values
//! - [`model`]: reference embedding backbone with masked forwards, exact
//!   input-embedding gradients, and a desk-scale trainer
//! - [`calib`]: offline logit normalizer and per-field filtering thresholds
//! - [`uncertain`]: dual-signal uncertainty score and path budget
//! - [`refine`]: composite feature scores, threshold filtering, refined pass
//! - [`explore`]: seeded stochastic feature-path construction and scoring
//! - [`aggregate`]: consistency-weighted prediction pooling
//! - [`engine`]: per-instance orchestration, traces, batch execution
//! - [`synth`]: synthetic corpus generator with known ground truth
//! - [`metrics`]: AUC / LogLoss / rank-correlation evaluation harness

pub mod aggregate;
pub mod calib;
pub mod data;
pub mod engine;
pub mod error;
pub mod explore;
pub mod hashing;
pub mod metrics;
pub mod model;
pub mod refine;
pub mod rng;
pub mod sketch;
pub mod synth;
pub mod uncertain;

pub use error::{Error, Result};
