//! Off-policy evaluation of human returns.
//!
//! Episodes carry one human return each. [`vlmh`] learns a latent model of
//! the episodes, [`rilr`] reconstructs per-step human rewards that respect
//! each episode's discounted sum, and [`estimators`] evaluates target
//! policies on the reconstructed rewards. [`pipeline`] wires these together
//! with the simulators in [`envs`].

pub mod envs;
pub mod error;
pub mod estimators;
pub mod hmdp;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod rilr;
pub mod seed;
pub mod vlmh;

pub use error::{Error, Result};
