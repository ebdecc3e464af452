//! Tri-encoder multimodal pre-training on synthetic catalog-style data.
//!
//! The model is a text transformer (K layers), a linear patch embedder for
//! images, and a multimodal fusion transformer (M layers) sharing one pool of
//! K+M blocks. Pre-training combines five image-text objectives (MLM, two
//! masked-image objectives against frozen teachers, contrastive alignment,
//! matching with hard negatives) with nine omni-directional retrieval
//! objectives over (source, target) quadruples, scheduled round-robin.
//! Everything runs on a small reverse-mode autodiff tape; no external ML
//! framework.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod teachers;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
