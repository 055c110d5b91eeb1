//! Permutation-equivariant structured networks (PINN-1D / PINN-2D) with
//! size adaptation, plus two wireless case studies built on them:
//! unsupervised predictive resource allocation and supervised interference
//! power control.
//!
//! Module map:
//! - [`numcore`]: dense tensors, tape-based reverse-mode differentiation,
//!   optimizers, batch normalization, finite-difference checks.
//! - [`equinet`]: structured equivariant layers, the `beta_K` adapter, the
//!   fully connected baseline, block permutations and reference oracles.
//! - [`pra`]: predictive resource allocation (scenarios, LP oracle,
//!   primal-dual trainer, EDF baseline).
//! - [`intercoord`]: interference coordination (channels, sum-rate, WMMSE,
//!   grid oracle, supervised trainer, augmentation).
//! - [`persist`]: experiment configuration, dataset and checkpoint files.
//! - [`gradsuite`]: finite-difference checks of every model and loss.

pub mod equinet;
pub mod error;
pub mod gradsuite;
pub mod intercoord;
pub mod numcore;
pub mod persist;
pub mod pra;
pub mod rng;

pub use error::{Error, Result};
