//! Self-supervised MRI reconstruction with an unrolled conditional diffusion
//! denoiser.
//!
//! The pipeline: simulate undersampled acquisitions of synthetic phantoms
//! ([`phantom`], [`physics`]), train the unrolled cross-attention denoiser
//! ([`denoiser`]) from undersampled k-space alone ([`selfsup`]), and
//! reconstruct with a few-step conditional sampler ([`sampler`]). Gradients
//! come from the small reverse-mode engine in [`tensor`].

pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod physics;
pub mod sampler;
pub mod selfsup;
pub mod tensor;

pub use error::{Error, Result};
