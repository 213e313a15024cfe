//! Monte Carlo solver for equilibria of N exponential-utility agents with
//! common and idiosyncratic noise, and for their mean-field limit.

pub mod bsde;
pub mod cli;
pub mod config;
pub mod convergence;
pub mod error;
pub mod limit;
pub mod model;
pub mod nagent;
pub mod numeric;
pub mod paths;
pub mod regression;
pub mod verify;

pub use error::{Error, Result};
