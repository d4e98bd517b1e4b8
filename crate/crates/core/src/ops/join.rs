//! Equi-joins on word 0 with unique inner keys.
//!
//! Both joins emit one record per matching outer record: the outer record
//! followed by the inner record without its key. Carrying a row index as a
//! payload column turns the output into index pairs ([`index_pairs`]).

use std::cell::Cell;

use super::common::{chain_offset, share};
use super::order::{local_sort, range_partition_tables};
use super::table::{peek_rows, DistTable};
use crate::error::{Result, SimError};
use crate::host::{Route, Session};
use crate::kernels::cost::{self, COPY_WORD, DMA_SETUP, KEY_CMP, LOOP, SCAN_STEP};
use crate::kernels::hash::{HashBits, HASH32_COST};
use crate::kernels::hashtable::{Insert, OnDuplicate, SpmHashTable, PROBE_STEP};
use crate::kernels::partition::{hash_partition_count, hash_partition_scatter, radix_partition_below};
use crate::kernels::sort::copy_records;
use crate::kernels::{KernelConfig, MramArray};
use crate::machine::InstrClass::*;
use crate::machine::{run_on_dpu, Kernel, KernelMetrics, LaunchInfo, MachineConfig, Tasklet, TaskletFuture, Wram, WramRegion};

/// Row indices of one matching (inner, outer) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JoinIndexPair {
    pub inner: u64,
    pub outer: u64,
}

/// Sorted pairs read from the index columns of joined rows.
pub fn index_pairs(rows: &[Vec<i64>], inner_col: usize, outer_col: usize) -> Vec<JoinIndexPair> {
    let mut v: Vec<JoinIndexPair> =
        rows.iter().map(|r| JoinIndexPair { inner: r[inner_col] as u64, outer: r[outer_col] as u64 }).collect();
    v.sort_unstable();
    v
}

fn joined_cols(inner: &DistTable, outer: &DistTable) -> Vec<String> {
    outer.cols.iter().chain(inner.cols.iter().skip(1)).cloned().collect()
}

/// Records per tile when three tiles of the given widths share half the
/// scratchpad with the rest of the kernel.
fn join_tile(machine: &MachineConfig, kcfg: &KernelConfig, tn: usize, words: usize) -> usize {
    let budget = (machine.wram_budget(tn) / 8) as usize;
    (budget / (2 * tn * words)).clamp(1, JOIN_TILE.min(kcfg.buffer_elems))
}

/// Upper bound on records per join tile.
const JOIN_TILE: usize = 32;

/// Merges a sorted inner and a sorted outer array. Each tasklet takes a
/// share of the outer records, finds its starting inner record by binary
/// search and then walks both arrays in step.
pub struct MergeJoinKernel {
    inner: MramArray,
    outer: MramArray,
    stage: MramArray,
    out: MramArray,
    machine: MachineConfig,
    kcfg: KernelConfig,
    m: usize,
    outer_tiles: Vec<WramRegion>,
    inner_tiles: Vec<WramRegion>,
    out_tiles: Vec<WramRegion>,
    probe: Vec<WramRegion>,
    slot: WramRegion,
    pub matches: usize,
}

impl MergeJoinKernel {
    pub fn new(
        machine: &MachineConfig,
        kcfg: &KernelConfig,
        inner: MramArray,
        outer: MramArray,
        stage: u64,
        out: u64,
    ) -> Self {
        let wj = outer.w + inner.w - 1;
        MergeJoinKernel {
            inner,
            outer,
            stage: MramArray::new(stage, outer.len, wj),
            out: MramArray::new(out, outer.len, wj),
            machine: machine.clone(),
            kcfg: kcfg.clone(),
            m: 0,
            outer_tiles: Vec::new(),
            inner_tiles: Vec::new(),
            out_tiles: Vec::new(),
            probe: Vec::new(),
            slot: WramRegion::default(),
            matches: 0,
        }
    }

    /// First inner index whose key is not below `key`.
    async fn seek(&self, t: &Tasklet<'_>, key: i64) -> Result<usize> {
        let pw = self.probe[t.id()];
        let (mut a, mut b) = (0, self.inner.len);
        while a < b {
            let mid = (a + b) / 2;
            cost::charge(t, DMA_SETUP, 1);
            t.load(self.inner.rec_addr(mid), pw, 0, 1).await?;
            cost::charge(t, KEY_CMP, 1);
            cost::charge(t, LOOP, 1);
            if (t.ld(pw, 0) as i64) < key {
                a = mid + 1;
            } else {
                b = mid;
            }
        }
        Ok(a)
    }

    async fn run(&self, t: Tasklet<'_>) -> Result<()> {
        let id = t.id();
        let (wo, wi, wj, m) = (self.outer.w, self.inner.w, self.out.w, self.m);
        let (ot, it, jt) = (self.outer_tiles[id], self.inner_tiles[id], self.out_tiles[id]);
        let (lo, hi) = share(self.outer.len, t.count(), id);
        let ni = self.inner.len;
        let mut emitted = 0usize;
        let mut buffered = 0usize;
        if lo < hi {
            // Tile window over the inner array: records [ib, ib + il).
            let (mut ib, mut il) = (0usize, 0usize);
            let mut j = usize::MAX;
            let mut last: Option<i64> = None;
            let mut i = lo;
            while i < hi {
                let l = m.min(hi - i);
                cost::charge(&t, DMA_SETUP, 1);
                t.load(self.outer.rec_addr(i), ot, 0, l * wo).await?;
                if j == usize::MAX {
                    j = self.seek(&t, t.ld(ot, 0) as i64).await?;
                }
                for r in 0..l {
                    let ok = t.ld(ot, r * wo) as i64;
                    cost::charge(&t, SCAN_STEP, 1);
                    let mut hit = false;
                    while j < ni {
                        if j >= ib + il {
                            ib = j;
                            il = m.min(ni - j);
                            cost::charge(&t, DMA_SETUP, 1);
                            t.load(self.inner.rec_addr(ib), it, 0, il * wi).await?;
                        }
                        let ik = t.ld(it, (j - ib) * wi) as i64;
                        cost::charge(&t, KEY_CMP, 1);
                        if last == Some(ik) {
                            return Err(SimError::DuplicateInnerKey(ik));
                        }
                        if ik < ok {
                            last = Some(ik);
                            j += 1;
                            cost::charge(&t, SCAN_STEP, 1);
                            continue;
                        }
                        hit = ik == ok;
                        break;
                    }
                    if hit {
                        t.wram(|wr| {
                            let rec: Vec<u64> = wr.slice(ot)[r * wo..(r + 1) * wo].to_vec();
                            let inn: Vec<u64> = wr.slice(it)[(j - ib) * wi + 1..(j - ib + 1) * wi].to_vec();
                            let dst = &mut wr.slice_mut(jt)[buffered * wj..(buffered + 1) * wj];
                            dst[..wo].copy_from_slice(&rec);
                            dst[wo..].copy_from_slice(&inn);
                        });
                        cost::charge(&t, COPY_WORD, wj as u64);
                        // A matched key must not repeat in the next inner record.
                        if j + 1 < ni {
                            let next = if j + 1 < ib + il {
                                t.ld(it, (j + 1 - ib) * wi)
                            } else {
                                let pw = self.probe[id];
                                cost::charge(&t, DMA_SETUP, 1);
                                t.load(self.inner.rec_addr(j + 1), pw, 0, 1).await?;
                                t.ld(pw, 0)
                            };
                            cost::charge(&t, KEY_CMP, 1);
                            if next as i64 == ok {
                                return Err(SimError::DuplicateInnerKey(ok));
                            }
                        }
                        buffered += 1;
                        if buffered == m {
                            cost::charge(&t, DMA_SETUP, 1);
                            t.store(jt, 0, m * wj, self.stage.rec_addr(lo + emitted)).await?;
                            emitted += m;
                            buffered = 0;
                        }
                    }
                }
                i += l;
            }
            if buffered > 0 {
                cost::charge(&t, DMA_SETUP, 1);
                t.store(jt, 0, buffered * wj, self.stage.rec_addr(lo + emitted)).await?;
                emitted += buffered;
            }
        }
        let off = chain_offset(t, self.slot, emitted as u64).await? as usize;
        copy_records(t, self.stage, self.out, jt, m, lo, lo + emitted, off).await
    }
}

impl Kernel for MergeJoinKernel {
    fn name(&self) -> &'static str {
        "join_sort_merge"
    }

    fn setup(&mut self, wram: &mut Wram, info: LaunchInfo) -> Result<()> {
        let tn = info.tasklets;
        let (wo, wi, wj) = (self.outer.w, self.inner.w, self.out.w);
        self.m = join_tile(&self.machine, &self.kcfg, tn, wo + wi + wj);
        self.slot = wram.alloc_words(1)?;
        for _ in 0..tn {
            self.outer_tiles.push(wram.alloc_words(self.m * wo)?);
            self.inner_tiles.push(wram.alloc_words(self.m * wi)?);
            self.out_tiles.push(wram.alloc_words(self.m * wj)?);
            self.probe.push(wram.alloc_words(1)?);
        }
        Ok(())
    }

    fn tasklet<'a>(&'a self, t: Tasklet<'a>) -> TaskletFuture<'a> {
        Box::pin(self.run(t))
    }

    fn finish(&mut self, wram: &Wram) -> Result<()> {
        self.matches = wram.get(self.slot, 0) as usize;
        Ok(())
    }
}

/// Sort-merge join: both relations are range partitioned with shared
/// splitters and sorted on every DPU, then merged locally.
pub fn join_sort_merge(s: &mut Session, inner: &DistTable, outer: &DistTable) -> Result<DistTable> {
    s.ops.join += 1;
    let (inner, outer) = if s.dpu_count() == 1 {
        (inner.clone(), outer.clone())
    } else {
        let (mut v, splitters) = range_partition_tables(s, &[inner, outer])?;
        let o = v.pop().expect("two tables");
        let i = v.pop().expect("two tables");
        // Every DPU must hold exactly its key range of both relations.
        for t in [&i, &o] {
            for (d, rows) in peek_rows(s, t)?.iter().enumerate() {
                let below = d > 0 && rows.iter().any(|r| r[0] < splitters[d - 1]);
                let above = d + 1 < s.dpu_count() && rows.iter().any(|r| r[0] >= splitters[d]);
                if below || above {
                    return Err(SimError::RangeMismatch(d));
                }
            }
        }
        (i, o)
    };
    local_sort(s, &inner)?;
    local_sort(s, &outer)?;
    let wj = outer.w() + inner.w() - 1;
    let stage = s.alloc(outer.cap * wj)?;
    let out = s.alloc(outer.cap * wj)?;
    let (m, k) = (s.machine.clone(), s.opts.kernel.clone());
    let tn = s.tasklets();
    let rows = s.per_dpu(|d, dpu| {
        let kern = MergeJoinKernel::new(&m, &k, inner.array(d), outer.array(d), stage, out);
        let (kern, met) = run_on_dpu(&m, dpu, tn, kern)?;
        Ok((kern.matches, vec![met]))
    })?;
    Ok(DistTable { cols: joined_cols(&inner, &outer), addr: out, cap: outer.cap, rows })
}

/// Builds a per-tasklet scratchpad table from each inner group and probes
/// it with the matching outer group. Groups larger than the table are
/// built in chunks, with one pass over the outer group per chunk.
pub struct HashJoinKernel {
    inner: MramArray,
    outer: MramArray,
    inner_bounds: Vec<usize>,
    outer_bounds: Vec<usize>,
    stage: MramArray,
    out: MramArray,
    machine: MachineConfig,
    kcfg: KernelConfig,
    m: usize,
    cap: usize,
    stage_base: Vec<usize>,
    inner_tiles: Vec<WramRegion>,
    outer_tiles: Vec<WramRegion>,
    out_tiles: Vec<WramRegion>,
    tables: Vec<WramRegion>,
    slot: WramRegion,
    pub matches: usize,
    pub chunks: usize,
    chunks_seen: Cell<usize>,
}

impl HashJoinKernel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        machine: &MachineConfig,
        kcfg: &KernelConfig,
        inner: MramArray,
        inner_bounds: Vec<usize>,
        outer: MramArray,
        outer_bounds: Vec<usize>,
        stage: u64,
        out: u64,
    ) -> Self {
        let wj = outer.w + inner.w - 1;
        HashJoinKernel {
            inner,
            outer,
            inner_bounds,
            outer_bounds,
            stage: MramArray::new(stage, outer.len, wj),
            out: MramArray::new(out, outer.len, wj),
            machine: machine.clone(),
            kcfg: kcfg.clone(),
            m: 0,
            cap: 0,
            stage_base: Vec::new(),
            inner_tiles: Vec::new(),
            outer_tiles: Vec::new(),
            out_tiles: Vec::new(),
            tables: Vec::new(),
            slot: WramRegion::default(),
            matches: 0,
            chunks: 0,
            chunks_seen: Cell::new(0),
        }
    }

    /// Entries a per-tasklet table holds for `tn` tasklets.
    pub fn table_entries(machine: &MachineConfig, kcfg: &KernelConfig, tn: usize, wi: usize, wo: usize) -> usize {
        let wj = wi + wo - 1;
        let budget = (machine.wram_budget(tn) / 8) as usize;
        let m = join_tile(machine, kcfg, tn, wi + wo + wj);
        let left = budget.saturating_sub(1 + tn * m * (wi + wo + wj));
        let cap = SpmHashTable::capacity_for(left / tn, wi - 1);
        ((cap as f64 * kcfg.ht_fill_max).floor() as usize).clamp(1, cap.max(1))
    }

    fn groups(&self) -> usize {
        self.inner_bounds.len() - 1
    }

    async fn stage_flush(&self, t: &Tasklet<'_>, jt: WramRegion, cnt: usize, at: usize) -> Result<()> {
        if cnt == 0 {
            return Ok(());
        }
        cost::charge(t, DMA_SETUP, 1);
        t.store(jt, 0, cnt * self.out.w, self.stage.rec_addr(at)).await
    }

    async fn run(&self, t: Tasklet<'_>) -> Result<()> {
        let (id, tn) = (t.id(), t.count());
        let (wi, wo, wj, m) = (self.inner.w, self.outer.w, self.out.w, self.m);
        let (it, ot, jt) = (self.inner_tiles[id], self.outer_tiles[id], self.out_tiles[id]);
        let table = self.tables[id];
        let (fill, lanes) = (self.kcfg.ht_fill_max, wi - 1);
        let base = self.stage_base[id];
        let (mut emitted, mut buffered, mut chunks) = (0usize, 0usize, 0usize);
        let dup: Cell<Option<i64>> = Cell::new(None);
        for g in (id..self.groups()).step_by(tn) {
            cost::charge(&t, LOOP, 1);
            let (il, ih) = (self.inner_bounds[g], self.inner_bounds[g + 1]);
            let (ol, oh) = (self.outer_bounds[g], self.outer_bounds[g + 1]);
            if il == ih || ol == oh {
                continue;
            }
            let mut c = il;
            while c < ih {
                chunks += 1;
                let max = t.wram(|wr| -> Result<usize> {
                    let mut ht = SpmHashTable::attach(wr.slice_mut(table), self.cap, lanes, fill)?;
                    ht.clear();
                    Ok(ht.max_entries())
                })?;
                cost::charge(&t, &[(WramStore8, 1), (Add32, 1)], self.cap as u64 + 1);
                // Build: never more records than the table has room for.
                let mut filled = 0usize;
                while c < ih && filled < max {
                    let l = m.min(ih - c).min(max - filled);
                    cost::charge(&t, DMA_SETUP, 1);
                    t.load(self.inner.rec_addr(c), it, 0, l * wi).await?;
                    let probes = t.wram(|wr| -> Result<u64> {
                        let recs: Vec<u64> = wr.slice(it)[..l * wi].to_vec();
                        let mut ht = SpmHashTable::attach(wr.slice_mut(table), self.cap, lanes, fill)?;
                        let mut probes = 0;
                        for r in recs.chunks_exact(wi) {
                            let key = r[0] as i64;
                            let flag = |_: &mut [u64], _: &[u64]| dup.set(Some(key));
                            let (res, p) = ht.insert(key, &r[1..], OnDuplicate::Combine(&flag));
                            probes += p;
                            if res == Insert::Full {
                                return Err(SimError::Internal("join build overfilled its table".into()));
                            }
                        }
                        Ok(probes)
                    })?;
                    if let Some(k) = dup.get() {
                        return Err(SimError::DuplicateInnerKey(k));
                    }
                    cost::charge(&t, HASH32_COST, l as u64);
                    cost::charge(&t, PROBE_STEP, probes);
                    cost::charge(&t, COPY_WORD, (l * wi) as u64);
                    cost::charge(&t, LOOP, l as u64);
                    filled += l;
                    c += l;
                }
                // Probe with the whole outer group.
                let mut o = ol;
                while o < oh {
                    let l = m.min(oh - o);
                    cost::charge(&t, DMA_SETUP, 1);
                    t.load(self.outer.rec_addr(o), ot, 0, l * wo).await?;
                    for r in 0..l {
                        let (found, probes) = t.wram(|wr| -> Result<(bool, u64)> {
                            let key = wr.get(ot, r * wo) as i64;
                            let rec: Vec<u64> = wr.slice(ot)[r * wo..(r + 1) * wo].to_vec();
                            let ht = SpmHashTable::attach(wr.slice_mut(table), self.cap, lanes, fill)?;
                            let (slot, probes) = ht.probe(key);
                            let Some(slot) = slot else { return Ok((false, probes)) };
                            let pay = ht.payload(slot).to_vec();
                            let dst = &mut wr.slice_mut(jt)[buffered * wj..(buffered + 1) * wj];
                            dst[..wo].copy_from_slice(&rec);
                            dst[wo..].copy_from_slice(&pay);
                            Ok((true, probes))
                        })?;
                        cost::charge(&t, HASH32_COST, 1);
                        cost::charge(&t, PROBE_STEP, probes);
                        cost::charge(&t, LOOP, 1);
                        if found {
                            cost::charge(&t, COPY_WORD, wj as u64);
                            buffered += 1;
                            if buffered == m {
                                self.stage_flush(&t, jt, m, base + emitted).await?;
                                emitted += m;
                                buffered = 0;
                            }
                        }
                    }
                    o += l;
                }
            }
        }
        self.stage_flush(&t, jt, buffered, base + emitted).await?;
        emitted += buffered;
        self.chunks_seen.set(self.chunks_seen.get() + chunks);
        let off = chain_offset(t, self.slot, emitted as u64).await? as usize;
        copy_records(t, self.stage, self.out, jt, m, base, base + emitted, off).await
    }
}

impl Kernel for HashJoinKernel {
    fn name(&self) -> &'static str {
        "join_hash"
    }

    fn setup(&mut self, wram: &mut Wram, info: LaunchInfo) -> Result<()> {
        let tn = info.tasklets;
        let (wi, wo, wj) = (self.inner.w, self.outer.w, self.out.w);
        if self.inner_bounds.len() != self.outer_bounds.len() || self.inner_bounds.len() < 2 {
            return Err(SimError::Config("inner and outer groupings differ".into()));
        }
        // Stage space of a tasklet covers the outer records of its groups.
        let mut base = vec![0usize; tn];
        for (g, w) in self.outer_bounds.windows(2).enumerate() {
            if g % tn + 1 < tn {
                base[g % tn + 1] += w[1] - w[0];
            }
        }
        for x in 1..tn {
            base[x] += base[x - 1];
        }
        self.stage_base = base;
        self.m = join_tile(&self.machine, &self.kcfg, tn, wi + wo + wj);
        self.slot = wram.alloc_words(1)?;
        for _ in 0..tn {
            self.inner_tiles.push(wram.alloc_words(self.m * wi)?);
            self.outer_tiles.push(wram.alloc_words(self.m * wo)?);
            self.out_tiles.push(wram.alloc_words(self.m * wj)?);
        }
        let per = (wram.available() / 8) as usize / tn;
        self.cap = SpmHashTable::capacity_for(per, wi - 1);
        if self.cap < 2 {
            return Err(SimError::ScratchpadExhausted {
                requested: (tn * SpmHashTable::words_needed(2, wi - 1) * 8) as u64,
                available: wram.available(),
            });
        }
        let words = SpmHashTable::words_needed(self.cap, wi - 1);
        for _ in 0..tn {
            self.tables.push(wram.alloc_words(words)?);
        }
        Ok(())
    }

    fn tasklet<'a>(&'a self, t: Tasklet<'a>) -> TaskletFuture<'a> {
        Box::pin(self.run(t))
    }

    fn finish(&mut self, wram: &Wram) -> Result<()> {
        self.matches = wram.get(self.slot, 0) as usize;
        self.chunks = self.chunks_seen.get();
        Ok(())
    }
}

/// Hash bits used to spread records over `dpus` DPUs. A power of two gets
/// exactly one bucket per DPU; otherwise eight times as many buckets are
/// dealt round robin to keep the load even.
pub fn global_bucket_bits(dpus: usize) -> u32 {
    if dpus <= 1 {
        0
    } else if dpus.is_power_of_two() {
        dpus.trailing_zeros()
    } else {
        dpus.next_power_of_two().trailing_zeros() + 3
    }
}

/// Sends every record of `t` to DPU `bucket % dpus`, bucket taken from the
/// top `bits` hash bits.
fn hash_redistribute(s: &mut Session, t: &DistTable, bits: u32) -> Result<DistTable> {
    let dpus = s.dpu_count();
    let w = t.w();
    let hb = HashBits::top(0, bits);
    let parted = s.alloc(t.cap * w)?;
    let (m, k) = (s.machine.clone(), s.opts.kernel.clone());
    let counts = s.per_dpu(|d, dpu| {
        let (c, m1) = hash_partition_count(&m, dpu, t.array(d), hb, &k)?;
        let m2 = hash_partition_scatter(&m, dpu, t.array(d), &c.offsets, hb, parted, &k)?;
        Ok((c, vec![m1, m2]))
    })?;
    let mut recv = vec![0usize; dpus];
    let mut routes = Vec::new();
    for (src, c) in counts.iter().enumerate() {
        for b in 0..hb.buckets() {
            let n = c.sizes[b] as usize;
            recv[b % dpus] += n;
            routes.push(Route { src, mram_addr: parted + c.offsets[b] * w as u64 * 8, words: n * w, dst: b % dpus });
        }
    }
    let need = recv.iter().copied().max().unwrap_or(0);
    // Destination plus a partitioning scratch of the same size.
    let limit = s.mram_free_words() / (2 * w);
    if need > limit {
        let d = recv.iter().position(|&r| r == need).unwrap_or(0);
        return Err(SimError::SkewOverflow(format!(
            "hash bucket set of DPU {d} holds {need} records of {w} words, room for {limit}"
        )));
    }
    let dest = s.alloc(need * w)?;
    let mode = s.opts.transfer;
    s.redistribute(&routes, dest, need * w, mode)?;
    Ok(DistTable { cols: t.cols.clone(), addr: dest, cap: need, rows: recv })
}

/// Radix bits that bring the expected largest inner group to half a table.
fn radix_bits(max_inner: usize, entries: usize, skip: u32) -> u32 {
    let target = (entries / 2).max(1);
    let groups = max_inner.div_ceil(target).max(2);
    groups.next_power_of_two().trailing_zeros().clamp(1, 24.min(32 - skip))
}

/// Radix hash join: global hash redistribution, per-DPU radix partitioning
/// into scratchpad-sized groups, then build and probe.
pub fn join_hash(s: &mut Session, inner: &DistTable, outer: &DistTable) -> Result<DistTable> {
    s.ops.join += 1;
    let gb = global_bucket_bits(s.dpu_count());
    let (inner, outer) = if gb == 0 {
        (inner.clone(), outer.clone())
    } else {
        (hash_redistribute(s, inner, gb)?, hash_redistribute(s, outer, gb)?)
    };
    let (m, k) = (s.machine.clone(), s.opts.kernel.clone());
    let tn = s.tasklets();
    let entries = HashJoinKernel::table_entries(&m, &k, tn, inner.w(), outer.w());
    let bits = radix_bits(inner.max_rows(), entries, gb);
    let bpp = k.radix_buckets.trailing_zeros().min(bits);
    let si = s.alloc(inner.cap * inner.w())?;
    let so = s.alloc(outer.cap * outer.w())?;
    let wj = outer.w() + inner.w() - 1;
    let stage = s.alloc(outer.cap * wj)?;
    let out = s.alloc(outer.cap * wj)?;
    let rows = s.per_dpu(|d, dpu| {
        let (ia, oa) = (inner.array(d), outer.array(d));
        let ri = radix_partition_below(&m, dpu, ia, si, gb, bits, bpp, &k)?;
        let ro = radix_partition_below(&m, dpu, oa, so, gb, bits, bpp, &k)?;
        let ia = if ri.in_scratch { MramArray { addr: si, ..ia } } else { ia };
        let oa = if ro.in_scratch { MramArray { addr: so, ..oa } } else { oa };
        let kern = HashJoinKernel::new(&m, &k, ia, ri.bounds, oa, ro.bounds, stage, out);
        let (kern, met) = run_on_dpu(&m, dpu, tn, kern)?;
        let mut mets: Vec<KernelMetrics> = ri.metrics;
        mets.extend(ro.metrics);
        mets.push(met);
        Ok((kern.matches, mets))
    })?;
    Ok(DistTable { cols: joined_cols(&inner, &outer), addr: out, cap: outer.cap, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::host::SessionOptions;
    use crate::machine::metrics::total_dma_bytes;
    use crate::ops::table::load_rows;
    use crate::ops::JoinAlgo;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn session(dpus: usize, tasklets: usize) -> Session {
        let mut o = SessionOptions::default();
        o.kernel.tasklets = tasklets;
        Session::new(&MachineConfig::desk().with_dpus(dpus), o).unwrap()
    }

    /// Spreads (key, index) records round robin over the DPUs.
    fn spread(keys: &[i64], dpus: usize) -> Vec<Vec<u64>> {
        let mut per = vec![Vec::new(); dpus];
        for (i, &k) in keys.iter().enumerate() {
            per[i % dpus].extend([k as u64, i as u64]);
        }
        per
    }

    fn oracle(inner: &[i64], outer: &[i64]) -> Vec<JoinIndexPair> {
        let idx: HashMap<i64, usize> = inner.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        let mut v: Vec<JoinIndexPair> = outer
            .iter()
            .enumerate()
            .filter_map(|(o, k)| idx.get(k).map(|&i| JoinIndexPair { inner: i as u64, outer: o as u64 }))
            .collect();
        v.sort_unstable();
        v
    }

    fn run(algo: JoinAlgo, dpus: usize, tn: usize, inner: &[i64], outer: &[i64]) -> Result<Vec<JoinIndexPair>> {
        let mut s = session(dpus, tn);
        let i = load_rows(&mut s, &["k", "i"], &spread(inner, dpus))?;
        let o = load_rows(&mut s, &["k", "o"], &spread(outer, dpus))?;
        let j = match algo {
            JoinAlgo::SortMerge => join_sort_merge(&mut s, &i, &o)?,
            JoinAlgo::Hash => join_hash(&mut s, &i, &o)?,
        };
        assert_eq!(j.cols, ["k", "o", "i"]);
        let rows: Vec<Vec<i64>> = peek_rows(&s, &j)?.concat();
        for r in &rows {
            assert_eq!(r[0], outer[r[1] as usize]);
            assert_eq!(r[0], inner[r[2] as usize]);
        }
        Ok(index_pairs(&rows, 2, 1))
    }

    #[test]
    fn trivial_cases() {
        for algo in [JoinAlgo::SortMerge, JoinAlgo::Hash] {
            assert_eq!(
                run(algo, 1, 4, &[1, 2], &[2, 3]).unwrap(),
                vec![JoinIndexPair { inner: 1, outer: 0 }]
            );
            assert!(run(algo, 2, 4, &[1, 2, 3], &[4, 5, 6, 7]).unwrap().is_empty());
            assert!(run(algo, 3, 4, &[], &[4, 5]).unwrap().is_empty());
            assert!(run(algo, 3, 4, &[4, 5], &[]).unwrap().is_empty());
        }
    }

    #[test]
    fn random_joins_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for &(dpus, tn, ni) in &[(1, 1, 300), (1, 16, 5000), (3, 11, 4000), (4, 16, 20000), (8, 24, 9000)] {
            let mut inner: Vec<i64> = (0..ni as i64 * 3).collect();
            inner.shuffle(&mut rng);
            inner.truncate(ni);
            let outer: Vec<i64> = (0..2 * ni).map(|_| rng.gen_range(0..ni as i64 * 3)).collect();
            let want = oracle(&inner, &outer);
            for algo in [JoinAlgo::SortMerge, JoinAlgo::Hash] {
                assert_eq!(run(algo, dpus, tn, &inner, &outer).unwrap(), want, "{algo:?} dpus {dpus} tasklets {tn}");
            }
        }
    }

    #[test]
    fn duplicate_inner_keys_are_rejected() {
        let inner = [5, 9, 5, 1];
        let outer = [5, 9];
        for algo in [JoinAlgo::SortMerge, JoinAlgo::Hash] {
            assert!(matches!(run(algo, 1, 4, &inner, &outer), Err(SimError::DuplicateInnerKey(5))), "{algo:?}");
        }
    }

    #[test]
    fn large_groups_build_in_chunks() {
        // One tasklet, one DPU and a big inner side force multi-chunk groups.
        let m = MachineConfig::desk();
        let k = KernelConfig::default().with_tasklets(1);
        let e = HashJoinKernel::table_entries(&m, &k, 1, 2, 2);
        let ni = 6 * e;
        let inner: Vec<i64> = (0..ni as i64).map(|x| x * 7).collect();
        let outer: Vec<i64> = (0..ni as i64).map(|x| x * 3).collect();
        let mut d = crate::machine::Dpu::new(0, m.mram_bytes, m.wram_bytes);
        let iw: Vec<u64> = inner.iter().enumerate().flat_map(|(i, &x)| [x as u64, i as u64]).collect();
        let ow: Vec<u64> = outer.iter().enumerate().flat_map(|(i, &x)| [x as u64, i as u64]).collect();
        let ia = MramArray::new(0, ni, 2);
        let oa = MramArray::new(ia.bytes(), ni, 2);
        d.mram.write(ia.addr, &iw).unwrap();
        d.mram.write(oa.addr, &ow).unwrap();
        let stage = oa.addr + oa.bytes();
        let out = stage + oa.bytes() * 3 / 2;
        let kern = HashJoinKernel::new(&m, &k, ia, vec![0, ni], oa, vec![0, ni], stage, out);
        let (kern, _) = run_on_dpu(&m, &mut d, 1, kern).unwrap();
        assert!(kern.chunks >= 6);
        let got = d.mram.read_vec(out, kern.matches * 3).unwrap();
        let rows: Vec<Vec<i64>> = got.chunks(3).map(|c| c.iter().map(|&v| v as i64).collect()).collect();
        assert_eq!(index_pairs(&rows, 2, 1), oracle(&inner, &outer));
    }

    #[test]
    fn hash_join_hashes_more_and_moves_less() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let ni = 16_000usize;
        let mut inner: Vec<i64> = (0..ni as i64 * 2).collect();
        inner.shuffle(&mut rng);
        inner.truncate(ni);
        let outer: Vec<i64> = (0..2 * ni).map(|_| rng.gen_range(0..ni as i64 * 2)).collect();
        let mut totals = Vec::new();
        for algo in [JoinAlgo::SortMerge, JoinAlgo::Hash] {
            let mut s = session(4, 16);
            let i = load_rows(&mut s, &["k", "i"], &spread(&inner, 4)).unwrap();
            let o = load_rows(&mut s, &["k", "o"], &spread(&outer, 4)).unwrap();
            s.clear_log();
            match algo {
                JoinAlgo::SortMerge => join_sort_merge(&mut s, &i, &o).unwrap(),
                JoinAlgo::Hash => join_hash(&mut s, &i, &o).unwrap(),
            };
            let ms: Vec<KernelMetrics> = s.launches.iter().flat_map(|l| l.metrics.clone()).collect();
            let logic: u64 = ms.iter().map(|m| m.class(Logic32)).sum();
            totals.push((logic, total_dma_bytes(&ms)));
        }
        assert!(totals[1].0 > totals[0].0, "hash instructions {totals:?}");
        assert!(totals[0].1 > totals[1].1, "dma bytes {totals:?}");
    }
}
