//! Masked Bernoulli latent diffusion for unsupervised anomaly detection.
//!
//! A binary codec maps images into a binary latent space; a diffusion model
//! over Bernoulli bit-flip noise is trained to restore clean latents of
//! healthy images. At inference the latent of a test image is partially
//! noised and denoised while a monotone mask collects entries whose
//! predicted flip probability exceeds a threshold; masked entries are
//! replaced by the model's clean estimate and the rest keep the original
//! code, yielding a pseudo-healthy reconstruction. Anomalies are scored from
//! the reconstruction difference and from the fraction of masked entries.

pub mod anomaly;
pub mod codec;
pub mod config;
pub mod datagen;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::{BitTensor, Dims, Image, ProbTensor, ScalarMap};
