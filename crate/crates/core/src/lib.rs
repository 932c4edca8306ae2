//! Glyph-conditional denoising diffusion at desk scale.
//!
//! The crate trains a small U-Net to map clean printed glyph images to
//! handwritten-style images, synthesizes samples for categories never seen
//! as handwriting, and measures the downstream recognition benefit.

pub mod autodiff;
pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod glyphs;
pub mod guidance;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod schedule;

pub use error::CoreError;
