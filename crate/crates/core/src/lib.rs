//! Particle solver for consistency-regularised Wasserstein gradient flows.
//!
//! The crate jointly samples a latent posterior and fits a prompt embedding by
//! maximum marginal likelihood. It works on two analytically tractable latent
//! worlds: an affine-mean Gaussian and a Gaussian mixture. Both expose exact
//! scores and flow maps, so each sub-step of the solver can be checked against
//! closed-form or brute-force references (see [`oracles`]).
//!
//! The crate is `no_std` and needs only `alloc`. File formats, configuration
//! and the command line live in the companion `cwgf` crate.

#![no_std]
#![forbid(unsafe_code)]
// `!(x > 0.0)` style guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod error;
pub mod gaussian_world;
pub mod gmm_world;
pub mod linalg;
pub mod linear_ops;
pub mod oracles;
pub mod particles;
pub mod prompt;
pub mod rng;
pub mod schedule;
pub mod solver;
pub mod vae;
pub mod world;

pub use error::{Error, Result};

/// Dense column vector used for latents, pixels, prompts and observations.
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrix.
pub type Matrix = nalgebra::DMatrix<f64>;
