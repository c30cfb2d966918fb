//! Selective one-way diffusion: cyclic latent replacement with gated
//! attention-logit modulation over pluggable noise-prediction models.

// NaN must fail validation, hence the `!(x > 0.0)` checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention_mod;
pub mod config;
pub mod denoiser;
pub mod engine;
pub mod error;
pub mod grid;
pub mod harness;
pub mod planner;
pub mod raster;
pub mod sampler;
pub mod schedule;

pub use error::{Result, SowError};
pub use grid::{LatentGrid, RegionBox, TokenGrid};
