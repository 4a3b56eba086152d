//! Perching on moving inclined surfaces under target uncertainty.

pub mod error;
pub mod state;
pub mod target;
pub mod trajgen;

pub use error::{Error, Result};
pub mod reachability;
pub mod rng;
pub mod lodw;
pub mod replanner;
pub mod thrust_reg;
pub mod sim;
pub mod config;
pub mod harness;
