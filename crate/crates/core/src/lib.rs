//! Conditional deep hierarchical VAE (CDHVAE) for voice conversion on
//! log-mel spectrogram segments.
//!
//! The crate is organized around the processing pipeline:
//!
//! - [`features`]: waveform to log-mel extraction, segmentation, datasets and
//!   the binary feature-file format.
//! - [`model`]: the hierarchical encoder / prior / decoder with conditional
//!   instance normalization and the speaker-invariant split at level `K`.
//! - [`objective`]: the beta-weighted ELBO and rate/distortion accounting.
//! - [`trainer`]: optimization loop, checkpoints and training logs.
//! - [`conversion`]: segment- and utterance-level voice conversion.
//! - [`analysis`]: beta sweeps, speaker probes and rate-distortion plots.
//! - [`driver`]: the command-line front end.

pub mod analysis;
pub mod autodiff;
pub mod conversion;
pub mod driver;
pub mod error;
pub mod features;
pub mod model;
pub mod objective;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
