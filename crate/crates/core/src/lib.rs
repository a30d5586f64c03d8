//! Core of the colext federated learning testbed.

pub mod analysis;
pub mod clock;
pub mod config;
pub mod dataset;
pub mod emulator;
pub mod job;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod partition;
pub mod protocol;
pub mod strategy;
