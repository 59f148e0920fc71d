//! Triplet-supervised binary hashing: per-bit loss decomposition, block graph-cut
//! inference, a small neural hash function trained in bit groups, and retrieval metrics.

pub mod bqp;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod mincut;
pub mod model;

pub use error::{Error, Result};
