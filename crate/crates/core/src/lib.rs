//! Parametric unpaired image-to-image translation.
//!
//! A cycle-consistent least-squares GAN whose generators and discriminators
//! are conditioned on a real parameter vector `p`, together with a
//! procedural parametrized dataset renderer and an evaluation suite
//! (Fréchet and perceptual distances, sweep matrices, monotonicity reports,
//! latent PCA).

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
