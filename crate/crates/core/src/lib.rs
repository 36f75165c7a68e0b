//! Core simulator for federated class-incremental learning.
//!
//! The crate provides the task stream (datasets, schedules, client
//! partitions), the model zoo, rehearsal memory with online exemplar
//! condensation, the feature-space compensation stack (shared VAE, parameter
//! clustering, contrastive compensation), the federated runtime, and the
//! continual-learning metric suite. Everything is deterministic given a
//! master seed.

pub mod aggregate;
pub mod autodiff;
pub mod checkpoint;
pub mod client;
pub mod condense;
pub mod contrast;
pub mod dataset;
pub mod error;
pub mod finch;
pub mod groups;
pub mod kd;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod partition;
pub mod proto;
pub mod rng;
pub mod runtime;
pub mod schedule;
pub mod tensor;
pub mod transport;
pub mod vae;

pub use error::{Error, Result};
