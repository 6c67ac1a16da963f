//! Concept-driven personalization of a small text-to-image diffusion model.
//!
//! Concept tokens and latent masks are learned by alternating optimization
//! on a synthetic sprite world where ground-truth masks are known exactly.

pub mod attention;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod mask;
pub mod personalize;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod vocab;

pub use error::{Error, Result};
