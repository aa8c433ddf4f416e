//! Generative zero-shot learning in three stages.
//!
//! 1. [`semantic_vae`] compresses class attributes into a latent code.
//! 2. [`feature_wgan`] maps latent codes to visual features with a
//!    gradient-penalised Wasserstein critic and a frozen guidance classifier.
//! 3. [`align_cvae`] embeds (feature, attribute) pairs into a shared space
//!    where [`seer_classifier`] assigns labels by cosine distance to class anchors.
//!
//! [`pipeline`] runs the stages in order and [`eval`] scores the result.

pub mod align_cvae;
pub mod archive;
pub mod autodiff;
pub mod seer_classifier;
pub mod data;
pub mod error;
pub mod eval;
pub mod feature_wgan;
pub mod nn;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
pub mod latent;
pub mod semantic_vae;
