//! Experiment runner for the IRS downlink simulator.
//!
//! Reads TOML experiment specs layered over built-in profiles, drives the
//! training and evaluation routines of `irs-core`, and persists checkpoints,
//! received pilots, LMMSE statistics and CSV results.

pub mod error;
pub mod experiments;
pub mod formats;
pub mod records;
pub mod spec;

pub use error::{Result, SimError};
pub use spec::{ExperimentSpec, Method, Profile, SweepAxis};
