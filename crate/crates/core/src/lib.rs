//! Deterministic simulator of cross-silo federated learning for IoT malware
//! detection: data preparation, a small dense-network engine, federated
//! training with robust aggregation, poisoning attacks and an experiment
//! harness.

pub mod adversary;
pub mod aggregation;
pub mod dataset;
pub mod error;
pub mod federation;
pub mod harness;
pub mod neuralnet;
pub mod preprocess;
pub mod seed;

pub use error::{Error, Result};
