//! Simulation and analysis of phase-resolved optical decoherence in a driven
//! two-level ensemble.
//!
//! Internally all frequencies are angular (rad/s), times in seconds and
//! angles in radians. Configuration files and exports use kHz (ordinary
//! frequency), µs and degrees; see [`units`].

pub mod analysis;
pub mod bath;
pub mod bloch;
pub mod ensemble;
pub mod error;
pub mod runner;
pub mod sequence;
pub mod shf;
pub mod units;

pub use error::{Error, Result};
