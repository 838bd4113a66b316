//! Gradient-flow simulator and closed-form oracle for multi-head linear
//! self-attention trained on in-context linear regression.
//!
//! * [`task`]: covariance, sequence sampling, population moments.
//! * [`models`]: merged and separate key-query parametrizations and their
//!   equivalent linear networks.
//! * [`flow`]: exact expected-gradient flow, integrators, conservation laws,
//!   plateau detection and a Monte Carlo gradient oracle.
//! * [`theory`]: fixed points, time courses, scalar reductions and duration
//!   estimates.

pub mod error;
pub mod flow;
pub mod models;
pub mod rng;
pub mod task;
pub mod theory;

pub use error::{LsaError, Result};
