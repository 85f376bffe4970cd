//! Training-free subject-consistent generation over a toy diffusion denoiser.
//!
//! A batch of images is denoised together. Each image's self-attention may
//! attend to the subject patches of the batch's anchor images, queries are
//! blended toward a vanilla pass early on, subject-masked keys are randomly
//! dropped, and self-attention outputs of subject patches are pulled toward
//! their best-matching patches in other images. Anchors can be replayed
//! later with new companion prompts, or replaced by inverted real latents.

pub mod error;
pub mod numerics;
pub mod schedule;
pub mod denoiser;
pub mod masking;
pub mod attention;
pub mod injection;
pub mod io;
pub mod prompts;
pub mod eval;
pub mod pipeline;

pub use error::{Error, Result};
