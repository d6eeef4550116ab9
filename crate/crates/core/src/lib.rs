//! Personalized federated learning for multi-cell integrated sensing and
//! communication (ISAC) beamforming.
//!
//! Each base station trains a small neural beamformer on synthetic Rician
//! channels to maximize a weighted sum of its communication sum rate and
//! radar information rate. Base stations federate their models; the
//! EM-weighted personalized aggregation in [`fl`] decides, per station and
//! per round, how much of the global model to mix into the local one.

pub mod channel;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod fl;
pub mod metrics;
pub mod nn;

pub use error::{Error, Result};
