//! Procedural multivariate SDE universes and a distributional forecast benchmark.
//!
//! The crate samples stochastic systems along a complexity curriculum
//! ([`universe`]), integrates them and branches oracle futures
//! ([`simulator`]), scores sample-based forecasts with proper multivariate
//! scoring rules ([`scoring`]), and provides the classical baselines
//! ([`baselines`]) and mixture forecast heads ([`heads`]) that get scored.
//! [`harness`] wires everything into the recovery experiment and the
//! training-stream exporter.

pub mod baselines;
pub mod error;
pub mod exact_sum;
pub mod formats;
pub mod harness;
pub mod heads;
pub mod linalg;
pub mod rng;
pub mod scoring;
pub mod simulator;
pub mod universe;

pub use error::{Error, Result};
pub use rng::{derive_stream, RngStream};
