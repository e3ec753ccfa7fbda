//! Continual learning with low-rank adapters over a frozen network.
//!
//! Each task trains a fresh adapter. After training the adapter is assigned
//! to one of a bounded number of groups, pruned to its largest-magnitude
//! entries and concatenated into the group along the rank axis. The groups
//! are then merged into a single update of the frozen weights.

pub mod adapters;
pub mod backbone;
pub mod config;
pub mod error;
pub mod experiment;
pub mod ham;
pub mod io;
pub mod merging;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{HamError, Result};
