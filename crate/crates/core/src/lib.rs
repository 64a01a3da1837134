//! Image augmentation agent for weakly labeled image datasets.
//!
//! Stages: refine a background prompt with an LLM ([`prompt`]), build a
//! structural conditioning map ([`detector`]), generate a candidate with a
//! controlled diffusion backend ([`generation`]), gate it online with a
//! patch classifier ([`scorer`]) inside a per-image retry loop
//! ([`augment`]), and merge the accepted images with the originals
//! ([`assemble`]). Every external model sits behind a trait with a
//! deterministic mock and an HTTP client.

pub mod assemble;
pub mod augment;
pub mod cli;
pub mod config;
pub mod detector;
mod error;
pub mod generation;
pub mod http;
pub mod imageio;
pub mod manifest;
pub mod prompt;
pub mod scalar;
pub mod scorer;
pub mod seed;

pub use error::{Error, Result};
pub use scalar::{Matrix, Scalar};

/// Quality threshold shared by prompt and image refinement.
pub const DEFAULT_EPSILON: f64 = 0.9;

pub type MatrixF64 = scalar::Matrix<f64>;
pub type MatrixF32 = scalar::Matrix<f32>;
pub type PatchEmbeddingsF64 = scorer::PatchEmbeddings<f64>;
pub type PatchEmbeddingsF32 = scorer::PatchEmbeddings<f32>;
pub type LinearHeadF64 = scorer::LinearHead<f64>;
pub type LinearHeadF32 = scorer::LinearHead<f32>;
pub type QualityScoreF64 = scorer::QualityScore<f64>;
pub type QualityScoreF32 = scorer::QualityScore<f32>;
