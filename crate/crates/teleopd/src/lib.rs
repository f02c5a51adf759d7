//! Command-line entry point and websocket teleoperation service for the
//! residual copilot workbench.

pub mod cli;
pub mod protocol;
pub mod server;
pub mod session;
