//! Bayesian interaction primitives.
//!
//! Demonstrations of a two-agent interaction are compressed into basis
//! weights over a normalised phase, a Gaussian prior is fitted over those
//! weights together with phase and phase velocity, and at runtime an
//! extended Kalman filter tracks all three jointly from the partner's
//! motion. The controlled agent's remaining trajectory is regenerated from
//! the running estimate and smoothed before execution.

pub mod basis;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod filter;
pub mod interaction;
pub mod model;
pub mod prior;
pub mod response;
pub mod simgen;

pub use error::{Error, Result};
