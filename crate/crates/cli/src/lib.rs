//! Tooling around the core pipeline: live monitor, benchmark harness and the
//! end-to-end demo orchestrator used by the `soundaug` binary.

pub mod bench;
pub mod demo;
pub mod fixtures;
pub mod monitor;
