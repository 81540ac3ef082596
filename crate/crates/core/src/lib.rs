//! Simulation and learning core for IRS-assisted multiuser MISO downlink.
//!
//! The crate covers the full signal chain without touching the file system:
//! geometric channel synthesis ([`scenario`]), the uplink pilot protocol
//! ([`pilot`]), an LMMSE channel-estimation baseline ([`lmmse`]), downlink rate
//! objectives ([`rate`]), model-based optimizers ([`optim`]), a permutation
//! equivariant graph neural network that maps received pilots directly to
//! beamformers and reflection coefficients ([`gnn`]), and its training loop
//! ([`train`]).
//!
//! Everything is `no_std` + `alloc` compatible. The default `std` feature only
//! switches on faster math and runtime SIMD detection in the dependencies.
#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is how NaN is rejected throughout
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod hash;
mod prelude;

pub mod error;
pub mod gnn;
pub mod linalg;
pub mod lmmse;
pub mod optim;
pub mod pilot;
pub mod rate;
pub mod rng;
pub mod scenario;
pub mod train;

pub use error::{Error, Result};
pub use gnn::{Gnn, GnnConfig, GnnParameters, InputMode};

pub use pilot::{PilotPlan, ReceivedPilots};
pub use rate::{Solution, Utility};
pub use scenario::{CascadedChannels, ChannelSet, Placement, SystemConfig};

/// Complex scalar used throughout the crate.
pub type C64 = num_complex::Complex64;
/// Complex column vector.
pub type CVector = ndarray::Array1<C64>;
/// Complex matrix.
pub type CMatrix = ndarray::Array2<C64>;
