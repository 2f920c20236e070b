#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Confidence-aware attention calibration on a from-scratch causal decoder.
//!
//! * [`model`]: the attention core and its hook points
//! * [`vtc`]: visual-token calibration from a reference input
//! * [`aar`]: confidence-gated image-score re-scaling
//! * [`generation`]: the dual-pass greedy loop and ablation grid
//! * [`relevancy`]: rollout relevancy maps and their reductions
//! * [`world`]: planted-bias scenes and decoder
//! * [`metrics`]: CHAIR / AMBER-style metrics and telemetry
//! * [`cli`]: run configuration and subcommand drivers

pub mod aar;
pub mod cli;
pub mod error;
pub mod generation;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod relevancy;
pub mod suite;
pub mod vtc;
pub mod world;

pub use error::{Error, Result};
