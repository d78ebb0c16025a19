//! Proprioceptive odometry for quadruped robots.
//!
//! This crate estimates the 6-DoF trajectory of a legged robot from an IMU
//! and joint encoders only — no cameras, no GPS. The core is an error-state
//! Kalman filter whose contact model lets stance feet *roll*: each foot is a
//! sphere whose center moves with the foot frame's angular velocity instead
//! of being pinned to the ground. On top of the single filter sits an
//! interacting-multiple-model (IMM) bank that hedges between a "clean
//! rolling" mode and one or more "slipping" modes with inflated foot-velocity
//! process noise, so contact slip degrades the estimate gracefully instead of
//! corrupting it.
//!
//! The crate also ships a deterministic trot simulator that produces
//! kinematically consistent ground truth plus IMU/encoder logs, and the
//! evaluation toolbox (ATE, RPE, mode-probability timelines, closed-loop
//! spectral diagnostics) used to compare estimator variants.
//!
//! Modules, bottom up:
//! - [`so3`]: rotation-matrix algebra, `exp`/`log`, local ⊞/⊟ operators.
//! - [`kinematics`]: 3-DoF leg chain — forward kinematics, Jacobians,
//!   inverse kinematics, foot angular velocity, rolling velocity.
//! - [`state`]: nominal filter state, error-state layout, sensor sample types.
//! - [`eskf`]: prediction (RK4 nominal propagation, linearized covariance),
//!   rolling-aware and point-contact measurement updates, contact transitions.
//! - [`imm`]: mixing, per-mode likelihoods, probability update, fusion.
//! - [`sim`]: scenario configuration and the synthetic trot generator.
//! - [`logio`]: CSV log formats (IMU, legs, ground truth, estimates).
//! - [`runner`]: drives any estimator variant over a log directory.
//! - [`eval`]: trajectory metrics and stability diagnostics.

pub mod error;
pub mod eskf;
pub mod eval;
pub mod imm;
pub mod kinematics;
pub mod logio;
pub mod runner;
pub mod sim;
pub mod so3;
pub mod state;

pub use error::{Error, Result};

/// Re-exported so downstream crates share the same linear-algebra types.
pub use nalgebra;
