//! Shape-aware sparse mixture-of-experts for amodal segmentation.
//!
//! The pipeline embeds an object's visible mask, predicts a Gaussian over a
//! latent shape space, samples a latent code, routes it to the top-k of K
//! hypernetwork experts, and decodes the amodal mask from shared image
//! features. Everything runs on a small built-in tensor engine and is
//! trained on procedurally generated occlusion scenes.

pub mod error;
pub mod experts;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod router;
pub mod shape_encoder;
pub mod sweep;
pub mod synth_data;
pub mod trainer;

pub use error::{Error, Result};
