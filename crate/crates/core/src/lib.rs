//! Residual copilot workbench.
//!
//! A simulated admittance-controlled arm performs peg, gear and nut assembly
//! while a base pilot issues absolute pose commands and a learned copilot adds
//! a bounded residual correction.

pub mod admittance;
pub mod config;
pub mod copilot;
pub mod error;
pub mod harness;
pub mod nn;
pub mod pilots;
pub mod rollout;
pub mod se3;
pub mod seeds;
pub mod tasks;

pub use error::{Error, Result};
