//! Federated learning simulator for wireless signal classification under
//! adversarial perturbation, with accuracy-threshold defenses.

// `!(x > 0.0)` guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod config;
pub mod defense;
pub mod error;
pub mod experiment;
pub mod fedsim;
pub mod metrics;
pub mod neural;
pub mod results;
pub mod rng;
pub mod sigsyn;
pub mod sweep;
pub mod theory;

pub use error::{Error, Result};
