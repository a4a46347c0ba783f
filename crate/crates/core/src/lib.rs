//! Event-triggered distributed formation control and tracking for
//! Euler-Lagrange multi-agent systems.
//!
//! Agents broadcast their state only when a local triggering condition fires;
//! in between, every agent runs an estimator of its neighbors' states. The
//! crate simulates the closed loop deterministically and reports
//! communication and convergence metrics.

pub mod cli;
pub mod controller;
pub mod error;
pub mod estimators;
pub mod formation;
pub mod integrator;
pub mod models;
pub mod network;
pub mod simulation;
pub mod triggering;
pub mod verify;

pub use error::{Error, Result};
