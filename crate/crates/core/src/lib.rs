//! Tuning of high-dimensional controller parameter vectors.
//!
//! The workflow has three phases:
//!
//! 1. [`turbo`] (trust-region Bayesian optimization) searches the full
//!    parameter box of an [`env`] and records every evaluation in a
//!    [`param_space::ReplayBuffer`].
//! 2. A [`vae`] learns a low-dimensional latent box from the stable samples
//!    (cost below the fall penalty).
//! 3. The same optimizer searches the latent box, decoding each latent point
//!    back into controller parameters before evaluation.
//!
//! [`pipeline`] ties the phases together and persists their artifacts;
//! [`bench`] compares the optimizer against random search on standard test
//! functions.

pub mod bench;
pub mod env;
pub mod error;
pub mod gp;
pub mod param_space;
pub mod pipeline;
pub mod turbo;
pub mod vae;

pub use error::{Error, Result};
