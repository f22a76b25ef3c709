//! Spatial-frequency transformer tracking.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`]: dense `f64` tensors, a reverse-mode tape, parameters and a
//!   finite-difference gradient checker.
//! * [`fusion`]: toy patch-embedding backbone, cross-scale fusion with a
//!   lossless channel-to-space rearrangement, sinusoidal 2-D position codes.
//! * [`mhca`]: bidirectional multi-head cross-attention between template and
//!   search tokens.
//! * [`gaussian_prior`]: the Gaussian generation network and Gaussian maps.
//! * [`gpha`]: Gaussian-biased attention with DC/high-frequency decomposition
//!   and per-head emphasis, stacked into the spatial-frequency former.
//! * [`head_loss`]: classification/regression heads, ellipse labels, BCE,
//!   CIoU and L1 losses.
//! * [`model`]: the full tracker network.
//! * [`tracker`]: online inference with local/global search switching.

pub mod error;
pub mod fusion;
pub mod gaussian_prior;
pub mod gpha;
pub mod head_loss;
pub mod mhca;
pub mod model;
pub mod numerics;
pub mod tracker;

pub use error::{Error, Result};
