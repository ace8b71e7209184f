//! Weakly supervised pointwise localization toolkit.
//!
// Validation uses `!(x > 0.0)` style on purpose: the negation rejects NaN,
// which the suggested `x <= 0.0` would silently accept.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! A localizer network predicts a latent relevance mask over the input
//! image and a classifier classifies the masked content; both are trained
//! jointly from image-level labels alone using a min-max conditional
//! entropy objective with recursive erasing of already-found evidence.
//! The crate bundles the autodiff engine, the networks, mask construction,
//! the loss terms, the erasing loop, a deterministic synthetic dataset
//! generator, pixel/image-level metrics, and the training machinery.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod erasing;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod train;

mod error;

pub use error::{Error, Result};
