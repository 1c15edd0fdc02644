//! Thermal side-channel simulation and noise-injection shielding.

pub mod cli;
pub mod controller;
pub mod error;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod model;
pub mod report;
pub mod scenario;
pub mod sensors;
pub mod thermal;
pub mod workload;

pub use error::{Error, Result};
