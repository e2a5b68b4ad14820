//! Wireless federated-learning simulator with per-round joint control of
//! client scheduling, uplink channel and power allocation, and local epochs.
//!
//! Each round minimizes a Lyapunov drift-plus-penalty surrogate: virtual
//! energy queues keep long-run client spend within budget while a
//! convergence bound on the loss acts as the penalty.

pub mod channel;
pub mod config;
pub mod cost;
pub mod engine;
pub mod error;
pub mod estimator;
pub mod fl;
pub mod harness;
pub mod inner;
pub mod outer;
pub mod types;
pub mod verify;

pub use config::{SchedulerKind, SystemConfig};
pub use error::{Error, Result};
