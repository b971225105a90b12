//! Thermal ground-truth generation and frequency-spatial thermal field
//! prediction for four-layer 2.5D chiplet stacks.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense `f64` arrays and a tape-based
//!   reverse-mode differentiation engine.
//! * [`spectral`]: orthonormal 3D DCT/IDCT, anisotropic frequency weighting
//!   and 2D DFT magnitude/phase, all differentiable.
//! * [`thermal`]: compact thermal model assembly and a preconditioned
//!   conjugate-gradient solver that produce the training targets.
//! * [`dataset`]: seeded layout generation, input encoding and the on-disk
//!   dataset format.
//! * [`net`]: the prediction network (parameter preprocessing, dual-domain
//!   encoder, cross-scale frequency attention, residual decoder).
//! * [`loss`]: the hybrid frequency-spatial loss, accuracy metrics and
//!   thermal gradient scoring.
//! * [`harness`]: training, evaluation protocols, prediction export and
//!   the configuration file format used by the CLI.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod loss;
pub mod net;
pub mod spectral;
pub mod tensor;
pub mod thermal;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
