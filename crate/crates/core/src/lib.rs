//! Adversarial contrastive domain-generative learning for 1-D spectra.
//!
//! The crate trains K domain generators against a Siamese feature
//! extractor so that a single labelled acquisition condition yields both
//! a spectral denoiser and a classifier that transfers to unseen
//! acquisition conditions.

pub mod baselines;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod spectra;
pub mod training;

pub use error::{CheckpointError, Error, Result};
