//! Simulation and analysis of single-photon links between GNSS retroreflector
//! arrays and an optical ground station.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod ccr_response;
pub mod channel_sim;
pub mod error;
pub mod link_budget;
pub mod scenario;
pub mod units;

pub use error::{Error, Result};
pub use scenario::Scenario;
pub use units::{GaussianPulse, LossDb, Transmittance};
