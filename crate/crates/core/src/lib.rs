//! Simulation and survival-conditioned likelihood inference for finite-state
//! birth-death processes whose birth rate is an additive mixture of mechanisms.

pub mod error;
pub mod model;
pub mod spectral;

pub use error::{BdpError, Result};
pub mod rng;
pub mod simulate;
pub mod inference;
pub mod asymptotics;
