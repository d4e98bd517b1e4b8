//! Per-DPU memory images: bank memory (MRAM) and scratchpad (WRAM).

use crate::error::{Result, SimError};

/// Bank memory of one DPU. Stored as 64-bit words because every access is
/// 8-byte aligned; grows lazily up to its byte limit so that unused
/// capacity costs no host memory.
#[derive(Debug, Clone, Default)]
pub struct Mram {
    words: Vec<u64>,
    limit: u64,
}

impl Mram {
    pub fn new(limit_bytes: u64) -> Self {
        Mram { words: Vec::new(), limit: limit_bytes }
    }

    pub fn limit(&self) -> u64 {
        self.limit
    }

    /// Highest byte address ever written, rounded to a word.
    pub fn high_water(&self) -> u64 {
        self.words.len() as u64 * 8
    }

    pub fn check(&self, addr: u64, bytes: u64) -> Result<()> {
        if bytes == 0 {
            return Err(SimError::InvalidSize("zero-length bank memory access".into()));
        }
        if addr % 8 != 0 || bytes % 8 != 0 {
            return Err(SimError::Unaligned(format!("mram addr {addr:#x} size {bytes}")));
        }
        if addr.checked_add(bytes).map_or(true, |end| end > self.limit) {
            return Err(SimError::OutOfBounds(format!(
                "mram [{addr:#x}, +{bytes}) beyond {} bytes",
                self.limit
            )));
        }
        Ok(())
    }

    pub fn read(&self, addr: u64, out: &mut [u64]) -> Result<()> {
        self.check(addr, out.len() as u64 * 8)?;
        let start = (addr / 8) as usize;
        let have = self.words.len().saturating_sub(start).min(out.len());
        if have > 0 {
            out[..have].copy_from_slice(&self.words[start..start + have]);
        }
        out[have..].fill(0);
        Ok(())
    }

    pub fn write(&mut self, addr: u64, data: &[u64]) -> Result<()> {
        self.check(addr, data.len() as u64 * 8)?;
        let start = (addr / 8) as usize;
        let end = start + data.len();
        if self.words.len() < end {
            self.words.resize(end, 0);
        }
        self.words[start..end].copy_from_slice(data);
        Ok(())
    }

    pub fn read_vec(&self, addr: u64, words: usize) -> Result<Vec<u64>> {
        let mut v = vec![0; words];
        if words > 0 {
            self.read(addr, &mut v)?;
        }
        Ok(v)
    }
}

/// A scratchpad allocation. Offsets and sizes are in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WramRegion {
    pub offset: u64,
    pub bytes: u64,
}

impl WramRegion {
    pub fn words(&self) -> usize {
        (self.bytes / 8) as usize
    }

    /// Byte address of word `i` of this region.
    pub fn addr(&self, i: usize) -> u64 {
        self.offset + i as u64 * 8
    }

    /// Sub-region of `words` words starting at word `start`.
    pub fn sub(&self, start: usize, words: usize) -> WramRegion {
        debug_assert!(start + words <= self.words());
        WramRegion { offset: self.addr(start), bytes: words as u64 * 8 }
    }
}

/// Scratchpad of one DPU with a bump allocator. The allocation budget is the
/// scratchpad size minus one stack reserve per tasklet of the current launch.
#[derive(Debug, Clone, Default)]
pub struct Wram {
    words: Vec<u64>,
    budget: u64,
    used: u64,
    regions: Vec<WramRegion>,
}

impl Wram {
    pub fn new(bytes: u64) -> Self {
        Wram { words: vec![0; (bytes / 8) as usize], budget: bytes, used: 0, regions: Vec::new() }
    }

    /// Frees every allocation and sets the budget for the next launch.
    pub fn reset(&mut self, budget: u64) {
        self.budget = budget.min(self.words.len() as u64 * 8);
        self.used = 0;
        self.regions.clear();
    }

    pub fn available(&self) -> u64 {
        self.budget - self.used
    }

    pub fn regions(&self) -> &[WramRegion] {
        &self.regions
    }

    pub fn alloc(&mut self, bytes: u64, align: u64) -> Result<WramRegion> {
        if bytes == 0 {
            return Err(SimError::InvalidSize("zero-byte scratchpad allocation".into()));
        }
        if !matches!(align, 1 | 2 | 4 | 8) {
            return Err(SimError::InvalidSize(format!("alignment {align} does not divide 8")));
        }
        // Every region is word aligned so that DMA targets are always legal.
        let rounded = bytes.div_ceil(8) * 8;
        if rounded > self.available() {
            return Err(SimError::ScratchpadExhausted { requested: rounded, available: self.available() });
        }
        let region = WramRegion { offset: self.used, bytes: rounded };
        self.used += rounded;
        self.regions.push(region);
        Ok(region)
    }

    /// Allocates `words` 64-bit words.
    pub fn alloc_words(&mut self, words: usize) -> Result<WramRegion> {
        self.alloc(words as u64 * 8, 8)
    }

    /// Checks that `[addr, addr + bytes)` lies inside one allocation.
    pub fn check_span(&self, addr: u64, bytes: u64) -> Result<()> {
        if addr % 8 != 0 || bytes % 8 != 0 {
            return Err(SimError::Unaligned(format!("wram addr {addr:#x} size {bytes}")));
        }
        let idx = self.regions.partition_point(|r| r.offset <= addr);
        let ok = idx > 0 && {
            let r = self.regions[idx - 1];
            addr + bytes <= r.offset + r.bytes
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::OutOfBounds(format!("wram [{addr:#x}, +{bytes}) outside any allocation")))
        }
    }

    pub fn slice(&self, r: WramRegion) -> &[u64] {
        let s = (r.offset / 8) as usize;
        &self.words[s..s + r.words()]
    }

    pub fn slice_mut(&mut self, r: WramRegion) -> &mut [u64] {
        let s = (r.offset / 8) as usize;
        &mut self.words[s..s + r.words()]
    }

    pub fn get(&self, r: WramRegion, i: usize) -> u64 {
        assert!(i < r.words(), "scratchpad index {i} outside region of {} words", r.words());
        self.words[(r.offset / 8) as usize + i]
    }

    pub fn set(&mut self, r: WramRegion, i: usize, v: u64) {
        assert!(i < r.words(), "scratchpad index {i} outside region of {} words", r.words());
        self.words[(r.offset / 8) as usize + i] = v;
    }

    pub(crate) fn raw_span(&self, addr: u64, bytes: u64) -> &[u64] {
        let s = (addr / 8) as usize;
        &self.words[s..s + (bytes / 8) as usize]
    }

    pub(crate) fn raw_span_mut(&mut self, addr: u64, bytes: u64) -> &mut [u64] {
        let s = (addr / 8) as usize;
        &mut self.words[s..s + (bytes / 8) as usize]
    }
}

/// One simulated DPU.
#[derive(Debug, Clone)]
pub struct Dpu {
    pub id: usize,
    pub mram: Mram,
    pub wram: Wram,
}

impl Dpu {
    pub fn new(id: usize, mram_bytes: u64, wram_bytes: u64) -> Self {
        Dpu { id, mram: Mram::new(mram_bytes), wram: Wram::new(wram_bytes) }
    }
}
