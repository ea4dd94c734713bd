//! Diffusion-aided bundle adjustment.
//!
//! A conditional denoising-diffusion model over camera pose tuples, sampled
//! with Sampson-error guidance so the sampled cameras agree with two-view
//! epipolar constraints.

pub mod geometry;
pub mod diffusion;
pub mod conditioning;
pub mod denoiser;
pub mod scenegen;
pub mod guidance;
pub mod evalkit;
pub mod io;
