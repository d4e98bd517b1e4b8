use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Host-side costs: bus bandwidth per rank, host memory copies and buffer
/// allocation. Times are in seconds, bandwidths in bytes per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HostCostModel {
    /// Host to/from bank memory copy bandwidth of one rank.
    pub host_rank_bw: f64,
    /// Host memory copy bandwidth used for reordering.
    pub host_memcpy_bw: f64,
    /// Fixed cost of a general-purpose allocation.
    pub alloc_base: f64,
    pub alloc_per_byte: f64,
    /// Fixed cost of taking a buffer from the pool.
    pub pooled_alloc_base: f64,
    pub pooled_per_byte: f64,
    /// Ranks whose transfers can be serviced at the same time.
    pub host_threads: usize,
    /// Extra cost per fragment of a scatter/gather transfer.
    pub sg_fragment_overhead: f64,
}

impl Default for HostCostModel {
    fn default() -> Self {
        HostCostModel {
            host_rank_bw: 1.0e9,
            host_memcpy_bw: 2.0e9,
            alloc_base: 50e-6,
            alloc_per_byte: 0.25e-9,
            pooled_alloc_base: 1e-6,
            pooled_per_byte: 0.01e-9,
            host_threads: 4,
            sg_fragment_overhead: 200e-9,
        }
    }
}

impl HostCostModel {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("host_rank_bw", self.host_rank_bw),
            ("host_memcpy_bw", self.host_memcpy_bw),
            ("alloc_base", self.alloc_base),
            ("alloc_per_byte", self.alloc_per_byte),
            ("pooled_alloc_base", self.pooled_alloc_base),
            ("pooled_per_byte", self.pooled_per_byte),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::Config(format!("host.{name} must be positive, got {v}")));
            }
        }
        if self.sg_fragment_overhead < 0.0 {
            return Err(SimError::Config("host.sg_fragment_overhead must be nonnegative".into()));
        }
        if self.host_threads == 0 {
            return Err(SimError::Config("host.host_threads must be positive".into()));
        }
        if self.pooled_alloc_base >= self.alloc_base || self.pooled_per_byte >= self.alloc_per_byte {
            return Err(SimError::Config("pooled allocation must be cheaper than naive allocation".into()));
        }
        Ok(())
    }

    pub fn alloc_seconds(&self, bytes: u64, pooled: bool) -> f64 {
        if pooled {
            self.pooled_alloc_base + self.pooled_per_byte * bytes as f64
        } else {
            self.alloc_base + self.alloc_per_byte * bytes as f64
        }
    }

    pub fn rank_copy_seconds(&self, bytes: u64) -> f64 {
        bytes as f64 / self.host_rank_bw
    }

    pub fn memcpy_seconds(&self, bytes: u64) -> f64 {
        bytes as f64 / self.host_memcpy_bw
    }
}
