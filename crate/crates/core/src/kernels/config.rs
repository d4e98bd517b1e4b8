use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::machine::MachineConfig;

/// Tiling and parallelism knobs shared by the kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    /// Upper bound on records per scratchpad tile. Kernels shrink it when
    /// the tiles of all tasklets would not fit the scratchpad budget.
    pub buffer_elems: usize,
    pub tasklets: usize,
    /// Buckets per radix partitioning pass; a power of two.
    pub radix_buckets: usize,
    /// Maximum load factor of scratchpad hash tables.
    pub ht_fill_max: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { buffer_elems: 256, tasklets: 16, radix_buckets: 32, ht_fill_max: 0.5 }
    }
}

impl KernelConfig {
    pub fn with_tasklets(&self, t: usize) -> Self {
        KernelConfig { tasklets: t, ..self.clone() }
    }

    pub fn validate(&self, m: &MachineConfig) -> Result<()> {
        if self.buffer_elems == 0 {
            return Err(SimError::Config("buffer_elems must be positive".into()));
        }
        if self.tasklets == 0 || self.tasklets > m.max_tasklets {
            return Err(SimError::TaskletCount(self.tasklets));
        }
        if !self.radix_buckets.is_power_of_two() || self.radix_buckets < 2 {
            return Err(SimError::Config(format!("radix_buckets {} must be a power of two ≥ 2", self.radix_buckets)));
        }
        if !(self.ht_fill_max > 0.0 && self.ht_fill_max <= 1.0) {
            return Err(SimError::Config(format!("ht_fill_max {} must be in (0, 1]", self.ht_fill_max)));
        }
        Ok(())
    }

    /// Records per tile when every tasklet owns `buffers` tiles of
    /// `rec_words`-word records and `shared_bytes` go to shared structures.
    /// Fails when not even a `min_elems` tile fits.
    pub fn tile_elems(
        &self,
        m: &MachineConfig,
        buffers: usize,
        rec_words: usize,
        shared_bytes: u64,
        min_elems: usize,
    ) -> Result<usize> {
        let budget = m.wram_budget(self.tasklets);
        let per_elem = (self.tasklets * buffers * rec_words * 8) as u64;
        let fit = budget.saturating_sub(shared_bytes) / per_elem.max(1);
        let tile = (fit as usize).min(self.buffer_elems);
        if tile < min_elems.max(1) {
            return Err(SimError::ScratchpadExhausted {
                requested: shared_bytes + per_elem * min_elems.max(1) as u64,
                available: budget,
            });
        }
        Ok(tile)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tile_shrinks_to_fit_budget() {
        let m = MachineConfig::desk();
        let k = KernelConfig::default();
        // 16 tasklets leave 32 KiB; two 16-byte tiles each give 64 records.
        assert_eq!(k.tile_elems(&m, 2, 2, 0, 1).unwrap(), 64);
        let k1 = k.with_tasklets(1);
        assert_eq!(k1.tile_elems(&m, 2, 2, 0, 1).unwrap(), 256);
        assert!(k.tile_elems(&m, 2, 2, 40 << 10, 1).is_err());
    }

    #[test]
    fn validation() {
        let m = MachineConfig::desk();
        assert!(KernelConfig::default().validate(&m).is_ok());
        assert!(KernelConfig { radix_buckets: 24, ..Default::default() }.validate(&m).is_err());
        assert!(KernelConfig { tasklets: 25, ..Default::default() }.validate(&m).is_err());
    }
}
