//! Retinex-based low-light image enhancement.
//!
//! The pipeline has three separately trained sub-networks:
//!
//! * [`decom_net`] splits an image `S` into reflectance `R` (3 channels) and
//!   illumination `I` (1 channel) with `S ≈ R ∘ I`.
//! * [`denoise_net`] cleans the low-light reflectance, conditioned on `I`.
//! * [`relight_net`] predicts an enhanced illumination from a spatial
//!   contrast branch and a frequency-domain detail branch; the enhanced
//!   image is the denoised reflectance times that illumination.
//!
//! [`losses`] holds the stage objectives, [`trainer`] the staged optimizer
//! loop and checkpoints, [`metrics`] the full-reference quality measures and
//! [`data_io`] image and paired-dataset handling.

pub mod data_io;
pub mod decom_net;
pub mod denoise_net;
pub mod error;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod relight_net;
pub mod spectral_ops;
pub mod trainer;

pub use error::{Error, Result};

/// Element type usable by every network and frequency-domain op.
pub trait Float: r2r_tensor::Real + rustfft::FftNum {}

impl<T: r2r_tensor::Real + rustfft::FftNum> Float for T {}
