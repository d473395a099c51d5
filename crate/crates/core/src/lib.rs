//! Deterministic water-quality telemetry pipeline.
//!
//! A sensor node samples pH and dissolved oxygen and sends checksummed frames
//! to a gateway, which adds TDS, temperature and level readings, builds one
//! [`gateway::TelemetryRecord`] per cycle and pushes it through a durable
//! store-and-forward [`uplink`] to a cloud sink. Everything runs on simulated
//! time with seeded noise, so a run is reproducible byte for byte.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod clock;
pub mod dsp;
pub mod error;
pub mod flags;
pub mod gateway;
pub mod metrics;
pub mod node;
pub mod report;
pub mod scenario;
pub mod sensors;
pub mod sim;
pub mod uplink;

pub use error::{Error, Result};
