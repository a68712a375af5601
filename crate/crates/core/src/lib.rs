//! Weak-measurement traversal times for one-dimensional wavepackets.
//!
//! The crate computes the sojourn-time operator of a spatial region,
//! its (conditional) weak values and higher moments, and reproduces them
//! with three physical clocks and a von Neumann pointer simulation.

pub mod clocks;
pub mod dynamics;
pub mod error;
pub mod hilbert;
pub mod meter;
pub mod scenarios;
pub mod sojourn;

pub use error::{Error, Result};
