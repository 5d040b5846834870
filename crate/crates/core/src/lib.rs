//! Multi-fidelity Monte Carlo estimation of output densities.
//!
//! A cheap low-fidelity (LF) model is run on many input samples and an
//! expensive high-fidelity (HF) model on a few well-spread ones. A Gaussian
//! process learns `p(y_HF | z_LF)` and the HF output density is recovered,
//! with pointwise credible bands, by averaging the conditional over the LF
//! samples.

pub mod artifacts;
pub mod bmfmc;
pub mod costmodel;
pub mod dimreduce;
pub mod error;
pub mod features;
pub mod gp;
pub mod harness;
pub mod inputs;
pub mod linalg;
pub mod metrics;
pub mod optim;
mod par;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
