//! Estimation of electromechanical oscillation modes (frequency and damping)
//! from multi-channel ringdown measurements.
//!
//! The crate provides a centralized extended Kalman filter, two diffusion
//! variants that run on a simulated PMU communication graph, Prony-based
//! baselines, FFT-based initialization and a Monte Carlo harness that
//! compares them.

pub mod baselines;
pub mod bench;
pub mod cekf;
pub mod distributed;
pub mod error;
pub mod init_detect;
mod linalg;
pub mod signal_model;

pub use error::{Error, Result};
