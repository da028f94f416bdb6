//! Connector mixture-of-experts laboratory.
//!
//! Projection-expert connectors with learned routing, LoRA-MoE adapters and
//! gradient-interference diagnostics, trained end to end on synthetic
//! multi-task problems small enough to check every formula numerically.

pub mod connector;
pub mod error;
pub mod experiment;
pub mod harness;
pub mod interference;
pub mod lora;
pub mod metrics;
pub mod numerics;
pub mod par;
pub mod routers;

pub use error::{LabError, Result};
