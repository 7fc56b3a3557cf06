//! Latent text diffusion at desk scale.
//!
//! Text is mapped into a continuous latent space by a frozen encoder, a
//! transformer denoiser is trained on noised latents, and a decoder head
//! maps generated latents back to tokens.

pub mod config;
pub mod corpus;
pub mod decoder;
pub mod denoiser;
pub mod encoder;
pub mod error;
pub mod grammar;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
