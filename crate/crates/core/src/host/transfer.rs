//! Host to/from bank memory copies: the four transfer kinds, their data
//! movement and their per-rank cost.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::machine::{Dpu, MachineConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    /// One DPU.
    Serial,
    /// The same bytes to many DPUs.
    Broadcast,
    /// One (address, length) on every DPU of a set, one host buffer each.
    Parallel,
    /// Arbitrary per-DPU fragment lists.
    ScatterGather,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ToDpu,
    FromDpu,
}

/// `words` 64-bit words at `mram_addr` on `dpu`, matched with the host
/// buffer starting at word `host_offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub dpu: usize,
    pub mram_addr: u64,
    pub host_offset: usize,
    pub words: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferDescriptor {
    pub kind: TransferKind,
    pub dir: Direction,
    pub fragments: Vec<Fragment>,
}

/// Bytes and fragments a descriptor moves over one rank's bus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RankLoad {
    pub bytes: u64,
    pub fragments: u64,
}

impl TransferDescriptor {
    pub fn serial(dir: Direction, dpu: usize, mram_addr: u64, host_offset: usize, words: usize) -> Self {
        TransferDescriptor { kind: TransferKind::Serial, dir, fragments: vec![Fragment { dpu, mram_addr, host_offset, words }] }
    }

    /// Host words `[0, words)` to `mram_addr` on every DPU in `dpus`.
    pub fn broadcast(dpus: impl IntoIterator<Item = usize>, mram_addr: u64, words: usize) -> Self {
        let fragments = dpus.into_iter().map(|dpu| Fragment { dpu, mram_addr, host_offset: 0, words }).collect();
        TransferDescriptor { kind: TransferKind::Broadcast, dir: Direction::ToDpu, fragments }
    }

    /// DPU `dpus[i]` pairs with host words `[i * words, (i + 1) * words)`.
    pub fn parallel(dir: Direction, dpus: impl IntoIterator<Item = usize>, mram_addr: u64, words: usize) -> Self {
        let fragments = dpus
            .into_iter()
            .enumerate()
            .map(|(i, dpu)| Fragment { dpu, mram_addr, host_offset: i * words, words })
            .collect();
        TransferDescriptor { kind: TransferKind::Parallel, dir, fragments }
    }

    pub fn scatter_gather(dir: Direction, fragments: Vec<Fragment>) -> Self {
        TransferDescriptor { kind: TransferKind::ScatterGather, dir, fragments }
    }

    pub fn validate(&self, machine: &MachineConfig) -> Result<()> {
        let bad = |m: String| Err(SimError::Transfer(m));
        for f in &self.fragments {
            if f.mram_addr % 8 != 0 {
                return Err(SimError::Unaligned(format!("fragment at {:#x} on dpu {}", f.mram_addr, f.dpu)));
            }
            if f.dpu >= machine.dpu_count {
                return bad(format!("dpu {} out of range", f.dpu));
            }
            if f.mram_addr + f.words as u64 * 8 > machine.mram_bytes {
                return Err(SimError::OutOfBounds(format!(
                    "fragment [{:#x}, +{}) beyond bank memory of dpu {}",
                    f.mram_addr,
                    f.words * 8,
                    f.dpu
                )));
            }
        }
        let first = self.fragments.first();
        match self.kind {
            TransferKind::Serial if self.fragments.len() != 1 => bad("serial transfer must target one dpu".into()),
            TransferKind::Broadcast | TransferKind::Parallel => {
                if self.kind == TransferKind::Broadcast && self.dir != Direction::ToDpu {
                    return bad("broadcast only copies to dpus".into());
                }
                let f0 = first.copied().unwrap_or(Fragment { dpu: 0, mram_addr: 0, host_offset: 0, words: 0 });
                if self.fragments.iter().any(|f| f.mram_addr != f0.mram_addr || f.words != f0.words) {
                    return bad(format!("{:?} transfer needs one (address, length) for all dpus", self.kind));
                }
                let mut seen = std::collections::BTreeSet::new();
                if !self.fragments.iter().all(|f| seen.insert(f.dpu)) {
                    return bad("dpu listed twice".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Load per rank. Broadcast payloads cross each rank's bus once.
    pub fn rank_loads(&self, machine: &MachineConfig) -> BTreeMap<usize, RankLoad> {
        let mut out: BTreeMap<usize, RankLoad> = BTreeMap::new();
        for f in &self.fragments {
            let l = out.entry(machine.rank_of(f.dpu)).or_default();
            l.fragments += 1;
            if self.kind == TransferKind::Broadcast {
                l.bytes = f.words as u64 * 8;
            } else {
                l.bytes += f.words as u64 * 8;
            }
        }
        out
    }

    /// Seconds the descriptor keeps each rank busy.
    pub fn rank_seconds(&self, machine: &MachineConfig) -> BTreeMap<usize, (f64, u64)> {
        let h = &machine.host;
        self.rank_loads(machine)
            .into_iter()
            .map(|(r, l)| {
                let mut s = h.rank_copy_seconds(l.bytes);
                if self.kind == TransferKind::ScatterGather {
                    s += h.sg_fragment_overhead * l.fragments as f64;
                }
                (r, (s, l.bytes))
            })
            .collect()
    }

    pub fn total_bytes(&self) -> u64 {
        self.fragments.iter().map(|f| f.words as u64 * 8).sum()
    }

    /// Copies host words into bank memory.
    pub fn apply_to_dpus(&self, dpus: &mut [Dpu], host: &[u64]) -> Result<()> {
        if self.dir != Direction::ToDpu {
            return Err(SimError::Transfer("descriptor copies from dpus".into()));
        }
        for f in self.fragments.iter().filter(|f| f.words > 0) {
            let src = host.get(f.host_offset..f.host_offset + f.words).ok_or_else(|| {
                SimError::Transfer(format!("host range [{}, +{}) out of buffer", f.host_offset, f.words))
            })?;
            dpus[f.dpu].mram.write(f.mram_addr, src)?;
        }
        Ok(())
    }

    /// Copies bank memory into host words.
    pub fn apply_from_dpus(&self, dpus: &[Dpu], host: &mut [u64]) -> Result<()> {
        if self.dir != Direction::FromDpu {
            return Err(SimError::Transfer("descriptor copies to dpus".into()));
        }
        for f in self.fragments.iter().filter(|f| f.words > 0) {
            let len = host.len();
            let dst = host.get_mut(f.host_offset..f.host_offset + f.words).ok_or_else(|| {
                SimError::Transfer(format!("host range [{}, +{}) out of buffer of {len}", f.host_offset, f.words))
            })?;
            dpus[f.dpu].mram.read(f.mram_addr, dst)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn machine() -> MachineConfig {
        MachineConfig { dpu_count: 8, dpus_per_rank: 4, ..MachineConfig::desk() }
    }

    fn dpus(m: &MachineConfig) -> Vec<Dpu> {
        (0..m.dpu_count).map(|i| Dpu::new(i, m.mram_bytes, m.wram_bytes)).collect()
    }

    #[test]
    fn broadcast_charges_payload_once_per_rank() {
        let m = machine();
        let d = TransferDescriptor::broadcast(0..4, 0, 128);
        d.validate(&m).unwrap();
        let loads = d.rank_loads(&m);
        assert_eq!(loads.len(), 1);
        assert_eq!(loads[&0].bytes, 1024);
    }

    #[test]
    fn parallel_round_trip() {
        let m = machine();
        let mut ds = dpus(&m);
        let host: Vec<u64> = (0..8 * 16).collect();
        let d = TransferDescriptor::parallel(Direction::ToDpu, 0..8, 64, 16);
        d.validate(&m).unwrap();
        d.apply_to_dpus(&mut ds, &host).unwrap();
        assert_eq!(ds[3].mram.read_vec(64, 16).unwrap(), (48..64).collect::<Vec<u64>>());
        let mut back = vec![0; 128];
        TransferDescriptor::parallel(Direction::FromDpu, 0..8, 64, 16).apply_from_dpus(&ds, &mut back).unwrap();
        assert_eq!(back, host);
        let loads = d.rank_loads(&m);
        assert_eq!(loads[&0].bytes, 4 * 128);
        assert_eq!(loads[&1].bytes, 4 * 128);
    }

    #[test]
    fn parallel_as_scatter_gather_moves_identical_data() {
        let m = machine();
        let host: Vec<u64> = (0..8 * 16).map(|x| x * 7).collect();
        let p = TransferDescriptor::parallel(Direction::ToDpu, 0..8, 0, 16);
        let sg = TransferDescriptor::scatter_gather(Direction::ToDpu, p.fragments.clone());
        let (mut a, mut b) = (dpus(&m), dpus(&m));
        p.apply_to_dpus(&mut a, &host).unwrap();
        sg.apply_to_dpus(&mut b, &host).unwrap();
        for i in 0..8 {
            assert_eq!(a[i].mram.read_vec(0, 16).unwrap(), b[i].mram.read_vec(0, 16).unwrap());
        }
    }

    #[test]
    fn invalid_descriptors() {
        let m = machine();
        let unaligned = TransferDescriptor::serial(Direction::ToDpu, 0, 4, 0, 1);
        assert!(matches!(unaligned.validate(&m), Err(SimError::Unaligned(_))));
        let two = TransferDescriptor { kind: TransferKind::Serial, ..TransferDescriptor::parallel(Direction::ToDpu, 0..2, 0, 1) };
        assert!(two.validate(&m).is_err());
        let mut uneven = TransferDescriptor::parallel(Direction::ToDpu, 0..2, 0, 4);
        uneven.fragments[1].words = 3;
        assert!(uneven.validate(&m).is_err());
    }

    #[test]
    fn scatter_gather_pays_per_fragment() {
        let m = machine();
        let frags: Vec<Fragment> =
            (0..100).map(|i| Fragment { dpu: 0, mram_addr: i * 8, host_offset: i as usize, words: 1 }).collect();
        let sg = TransferDescriptor::scatter_gather(Direction::ToDpu, frags);
        let one = TransferDescriptor::serial(Direction::ToDpu, 0, 0, 0, 100);
        assert!(sg.rank_seconds(&m)[&0].0 > one.rank_seconds(&m)[&0].0);
    }
}
