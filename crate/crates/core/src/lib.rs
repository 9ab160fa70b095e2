//! Simulation and estimation of health spending when households learn their
//! out-of-pocket position from noisy, delayed bills.
//!
//! The crate is organised around a weekly household simulator
//! ([`simulator`]) built from the cost-sharing contract ([`contract`]),
//! health shocks ([`shocks`]), perceived spending positions ([`beliefs`]) and
//! the spending rule ([`demand`]). On top of it sit structural estimation
//! ([`estimation`]), counterfactual policies ([`counterfactuals`]) and
//! reduced-form Poisson regressions ([`econometrics`]).

pub mod beliefs;
pub mod config;
pub mod contract;
pub mod counterfactuals;
pub mod demand;
pub mod econometrics;
pub mod error;
pub mod estimation;
pub mod rng;
pub mod shocks;
pub mod simulator;
pub mod stats;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
