//! Core of a deterministic simulator for personalized prototype-based
//! federated learning with adaptive (similarity-weighted) prototype
//! aggregation.
//!
//! The crate is `no_std` and only needs `alloc`. Everything here is pure
//! computation: dense-vector numerics, a small MLP encoder with explicit
//! backprop, the hybrid classification + prototype-contrastive objective,
//! the parameter-server state machine, client updates, metrics and
//! convergence diagnostics. File formats, the experiment runner and the CLI
//! live in the `fedapa` companion crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod client;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod federation;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod prototypes;
pub mod server;

mod math;

pub use error::{Error, Result};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
