//! Simulation and estimation toolkit for identity-fragmented regression data.
//!
//! Users are split into device fragments ([`fragmentation`]), naive and
//! corrected estimators are fitted ([`estimators`], [`correctives`]), and the
//! conditional bias of the naive estimators is computed in closed form
//! ([`biascalc`]) and checked against Monte Carlo ([`harness`]).

pub mod biascalc;
pub mod correctives;
pub mod datagen;
pub mod error;
pub mod estimators;
pub mod fragmentation;
pub mod harness;
pub mod linalg;
pub mod rng;

pub use error::{Error, Result};
