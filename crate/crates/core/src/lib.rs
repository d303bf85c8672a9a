//! Stochastic first-order methods for objectives whose gradient oracle is
//! biased but bias-controllable through an integer level `eta`.

pub mod algorithms;
pub mod error;
pub mod fit;
pub mod harness;
pub mod oracle;
pub mod problems;
pub mod prox;
pub mod rng;

pub use error::{Error, Result};
