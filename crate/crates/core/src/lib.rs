//! One-shot glyph style transfer with a conditional denoising diffusion model.
//!
//! Given a content glyph rendered in a source font and a single reference
//! glyph in some target style, the network predicts diffusion noise
//! conditioned on both; sampling then renders the content in the reference
//! style.

pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod glyphset;
pub mod image;
pub mod network;
pub mod nn;
pub mod rng;
pub mod sample;
pub mod schedule;
pub mod scr;
pub mod train;

pub use error::{Error, Result};
pub use image::GlyphImage;
