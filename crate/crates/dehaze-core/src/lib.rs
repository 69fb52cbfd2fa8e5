//! Iterative predictor-critic code decoding for single-image dehazing.
//!
//! A discrete-codebook autoencoder supplies a high-quality latent prior;
//! a masked code predictor and a code critic alternately propose codes and
//! decide which to keep across decoding iterations.

pub mod ckpt;
pub mod config;
pub mod error;
pub mod haze;
pub mod imgio;
pub mod infer;
pub mod metrics;
pub mod nn;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod vq;

pub use error::{DehazeError, Result};
pub use tensor::{Scalar, Tensor};
