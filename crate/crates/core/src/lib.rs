//! Multifidelity ensemble Kalman filtering laboratory for Lorenz '96.
//!
//! The crate provides the full-order model ([`dynamics`]), two surrogate
//! families ([`rom_pod`], [`rom_autoencoder`]), ensemble statistics
//! ([`ensemble`]), the EnKF / MFEnKF / NL-MFEnKF analysis machinery
//! ([`filters`]) and a twin-experiment harness ([`harness`]).

// `!(x > 0.0)` is how validation rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod filters;
pub mod harness;
pub mod rng;
pub mod rom_autoencoder;
pub mod rom_pod;
pub mod storage;

pub use error::{Error, Result};
