//! Sidelink (PC5) positioning simulation toolkit.
//!
//! The crate is organised bottom-up:
//!
//! - [`scenario`]: deployment drops (highway, urban grid, indoor factory or
//!   hand-authored node lists), anchor selection and GDOP.
//! - [`clock`]: per-node clock offset and drift, truncated-normal
//!   synchronization error.
//! - [`channel`]: log-distance path loss with an exponential LoS probability,
//!   link SNR and NLoS excess delay.
//! - [`measurement`]: ToA, single/double-sided RTT, TDoA and AoA synthesis with
//!   CRLB-style noise floors.
//! - [`estimators`]: damped Gauss-Newton multilateration and TDoA solvers,
//!   bearing triangulation, single-anchor RTT+AoA and a brute-force grid oracle.
//! - [`protocol`]: NSL (MT-LR/MO-LR) and USL session state machine with
//!   message traces and latency accounting.
//! - [`harness`]: Monte Carlo runner, empirical CDFs, sweeps and positioning
//!   service level (PSL) checks.
//! - [`document`]: JSON experiment documents and the shipped presets.

pub mod channel;
pub mod clock;
pub mod document;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod measurement;
pub mod protocol;
pub mod scenario;

mod rng;

pub use error::{Error, Result};

/// Speed of light in vacuum, m/s (exact SI value).
pub const SPEED_OF_LIGHT_M_S: f64 = 299_792_458.0;

/// Node identifier, unique within a [`scenario::Scenario`].
pub type NodeId = u32;
