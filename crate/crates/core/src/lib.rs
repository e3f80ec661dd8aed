//! Gaussian probability-path flow matching for probabilistic forecasting of
//! dynamical systems in a latent space.
//!
//! The pipeline is: simulate trajectories ([`dynamics`]), fit a linear codec
//! ([`codec`]), train a conditional vector field regressor ([`model`],
//! [`train`]) against a chosen probability path ([`path`]), then forecast by
//! integrating the learned field ([`sampler`]) and score the result
//! ([`metrics`]). [`analysis`] holds numerical checks of the underlying
//! theory.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod codec;
pub mod dynamics;
pub mod error;
pub mod metrics;
pub mod model;
pub mod path;
pub mod rng;
pub mod sampler;
pub mod tensor_file;
pub mod train;

pub use error::{Error, Result};
