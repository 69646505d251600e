//! Diffusion inversion over analytically tractable denoisers.
//!
//! The crate implements deterministic DDIM sampling and inversion, a
//! dual-conditioned inversion loop that corrects each noise prediction
//! toward a reference noise and refines each latent toward a fixed point of
//! the inversion step, and the baselines it is measured against.

pub mod autodiff;
pub mod denoiser;
mod error;
pub mod inversion;
pub mod latent;
pub mod metrics;
pub mod schedule;

pub use denoiser::{cfg_predict, Conditioning, Denoiser, GaussianMixture, MlpDenoiser};
pub use error::{Error, Result};
pub use inversion::{InversionConfig, InversionReport, ReferenceMode, ReferenceNoise};
pub use latent::{Latent, Shape};
pub use schedule::NoiseSchedule;
