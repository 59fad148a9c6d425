//! Change-aware conditional diffusion for bitemporal change detection.
//!
//! The crate generates binary change maps from co-registered image pairs by
//! running a reverse diffusion chain whose noise predictor is conditioned on
//! per-level difference features of the two images.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod heatmap;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod predictor;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
