//! TwIST: independent subnetwork training for transformers, at desk scale.
//!
//! The crate simulates the full training system in one process: a subnet
//! generator produces per-layer block blueprints, a dispatcher materializes
//! them as masked or physically sliced workers, workers train on disjoint
//! data shards, and an aggregator folds the partially trained subnets back
//! into the central model. Analysis utilities verify the initialization
//! scaling laws by Monte Carlo, count parameters and communication volume,
//! and sweep subnet quality across deployment ratios.

pub mod aggregate;
pub mod analysis;
pub mod blueprint;
pub mod cli;
pub mod error;
pub mod model;
pub mod orchestrator;
pub mod partition;
pub mod tensor;

pub use error::{Result, TwistError};
