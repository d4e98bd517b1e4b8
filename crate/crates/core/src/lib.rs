//! Cost-modeled simulator of a processing-in-memory system built from DPUs
//! with private bank memory and scratchpad, plus columnar database operators
//! and a small TPC-H style query harness running on top of it.

pub mod error;
pub mod experiments;
pub mod host;
pub mod kernels;
pub mod machine;
pub mod ops;
pub mod query;

pub use error::{Result, SimError};
