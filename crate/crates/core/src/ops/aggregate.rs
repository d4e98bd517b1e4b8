//! Group-by aggregation keyed on word 0 of each record.
//!
//! Every aggregate function becomes one or two 64-bit lanes that combine
//! by addition: a count lane starts at 1, a sum lane at the column value,
//! an average carries both. Each DPU emits partial groups `[key, lanes..]`
//! which the host adds up across DPUs and finalizes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::common::{chain_offset, share, ClassCounts};
use super::table::DistTable;
use crate::error::{Result, SimError};
use crate::host::Session;
use crate::kernels::cost::{self, COPY_WORD, DMA_SETUP, KEY_CMP, LOOP, SCAN_STEP};
use crate::kernels::hash::{hash32, HASH32_COST};
use crate::kernels::hashtable::PROBE_STEP;
use crate::kernels::partition::radix_partition_below;
use crate::kernels::sort::{SortKernel, SortMode};
use crate::kernels::{Insert, KernelConfig, MramArray, OnDuplicate, SpmHashTable};
use crate::machine::InstrClass::*;
use crate::machine::{
    run_on_dpu, Kernel, KernelMetrics, LaunchInfo, MachineConfig, Tasklet, TaskletFuture, Wram, WramRegion,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggFn {
    /// Distinct keys; no lane.
    Unique,
    Count,
    Sum(usize),
    /// Sum and count lanes, divided on the host.
    Avg(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggSpec {
    pub funcs: Vec<AggFn>,
}

impl AggSpec {
    pub fn new(funcs: Vec<AggFn>) -> Self {
        AggSpec { funcs }
    }

    pub fn lanes(&self) -> usize {
        self.funcs
            .iter()
            .map(|f| match f {
                AggFn::Unique => 0,
                AggFn::Count | AggFn::Sum(_) => 1,
                AggFn::Avg(_) => 2,
            })
            .sum()
    }

    /// Words per partial group record.
    pub fn out_w(&self) -> usize {
        1 + self.lanes()
    }

    fn max_col(&self) -> usize {
        self.funcs
            .iter()
            .map(|f| match *f {
                AggFn::Sum(c) | AggFn::Avg(c) => c,
                _ => 0,
            })
            .max()
            .unwrap_or(0)
    }

    /// Lanes of a single record.
    pub fn init(&self, rec: &[u64], lanes: &mut [u64]) {
        let mut i = 0;
        for f in &self.funcs {
            match *f {
                AggFn::Unique => {}
                AggFn::Count => {
                    lanes[i] = 1;
                    i += 1;
                }
                AggFn::Sum(c) => {
                    lanes[i] = rec[c];
                    i += 1;
                }
                AggFn::Avg(c) => {
                    lanes[i] = rec[c];
                    lanes[i + 1] = 1;
                    i += 2;
                }
            }
        }
    }

    fn init_mix(&self) -> ClassCounts {
        let mut m = ClassCounts::default();
        for f in &self.funcs {
            match f {
                AggFn::Unique => {}
                AggFn::Count => m.add(WramStore8, 1),
                AggFn::Sum(_) => m.add_mix(COPY_WORD, 1),
                AggFn::Avg(_) => {
                    m.add_mix(COPY_WORD, 1);
                    m.add(WramStore8, 1);
                }
            }
        }
        m
    }

    fn combine_mix(&self) -> ClassCounts {
        let mut m = ClassCounts::default();
        m.add_mix(&[(WramLoad8, 2), (Add64, 1), (WramStore8, 1)], self.lanes() as u64);
        m
    }

    /// Final values of a combined group: one per function except
    /// `Unique`; averages truncate toward zero.
    pub fn finalize(&self, lanes: &[u64]) -> Vec<i64> {
        let mut out = Vec::new();
        let mut i = 0;
        for f in &self.funcs {
            match f {
                AggFn::Unique => {}
                AggFn::Count | AggFn::Sum(_) => {
                    out.push(lanes[i] as i64);
                    i += 1;
                }
                AggFn::Avg(_) => {
                    let (s, c) = (lanes[i] as i64, lanes[i + 1] as i64);
                    out.push(if c == 0 { 0 } else { s / c });
                    i += 2;
                }
            }
        }
        out
    }
}

/// Lane-wise wrapping addition.
pub fn combine(acc: &mut [u64], other: &[u64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a = a.wrapping_add(*b);
    }
}

/// Adds up partial group records `[key, lanes..]` by key.
pub fn merge_partials(rows: &[Vec<i64>]) -> BTreeMap<i64, Vec<u64>> {
    let mut out: BTreeMap<i64, Vec<u64>> = BTreeMap::new();
    for r in rows {
        let lanes: Vec<u64> = r[1..].iter().map(|&v| v as u64).collect();
        match out.get_mut(&r[0]) {
            Some(acc) => combine(acc, &lanes),
            None => {
                out.insert(r[0], lanes);
            }
        }
    }
    out
}

/// Copies the partial groups to the host and combines them.
pub fn collect_groups(s: &mut Session, partials: &DistTable) -> Result<BTreeMap<i64, Vec<u64>>> {
    let rows = super::table::fetch_rows(s, partials)?;
    Ok(merge_partials(&rows))
}

fn check_spec(t: &DistTable, spec: &AggSpec) -> Result<()> {
    if spec.funcs.is_empty() {
        return Err(SimError::Config("aggregation needs at least one function".into()));
    }
    if spec.max_col() >= t.w() {
        return Err(SimError::Config(format!("aggregate column out of range for width {}", t.w())));
    }
    Ok(())
}

fn out_names(spec: &AggSpec, key: &str) -> Vec<String> {
    let mut names = vec![key.to_string()];
    for (i, f) in spec.funcs.iter().enumerate() {
        match f {
            AggFn::Unique => {}
            AggFn::Count => names.push(format!("count{i}")),
            AggFn::Sum(_) => names.push(format!("sum{i}")),
            AggFn::Avg(_) => {
                names.push(format!("avg_sum{i}"));
                names.push(format!("avg_count{i}"));
            }
        }
    }
    names
}

/// Collapses runs of equal keys in a sorted array into partial groups.
/// Each tasklet owns the groups that start in its share; it skips a run
/// continuing from the previous share and reads past its end to finish
/// its last group. A first scan counts group starts so the offset chain
/// can run before any group is written.
pub struct GroupRunsKernel {
    src: MramArray,
    out: MramArray,
    spec: AggSpec,
    init: ClassCounts,
    comb: ClassCounts,
    machine: MachineConfig,
    kcfg: KernelConfig,
    m: usize,
    in_tiles: Vec<WramRegion>,
    out_tiles: Vec<WramRegion>,
    keys: Vec<WramRegion>,
    slot: WramRegion,
    pub groups: usize,
}

impl GroupRunsKernel {
    pub fn new(
        machine: &MachineConfig,
        kcfg: &KernelConfig,
        src: MramArray,
        out: u64,
        spec: &AggSpec,
    ) -> Self {
        let ow = spec.out_w();
        GroupRunsKernel {
            src,
            out: MramArray::new(out, src.len, ow),
            init: spec.init_mix(),
            comb: spec.combine_mix(),
            spec: spec.clone(),
            machine: machine.clone(),
            kcfg: kcfg.clone(),
            m: 0,
            in_tiles: Vec::new(),
            out_tiles: Vec::new(),
            keys: Vec::new(),
            slot: WramRegion::default(),
            groups: 0,
        }
    }

    /// Records of `[lo, hi)` whose key differs from the one before.
    async fn count_starts(&self, t: &Tasklet<'_>, lo: usize, hi: usize) -> Result<usize> {
        let (w, n) = (self.src.w, self.src.len);
        let (it, kslot) = (self.in_tiles[t.id()], self.keys[t.id()]);
        let m = self.m;
        let mut prev = None;
        if lo > 0 && lo < hi {
            cost::charge(t, DMA_SETUP, 1);
            t.load(self.src.rec_addr(lo - 1), kslot, 0, 1).await?;
            prev = Some(t.ld(kslot, 0));
        }
        let mut starts = 0;
        for tb in (lo..hi).step_by(m.max(1)) {
            let tl = m.min(hi - tb).min(n - tb);
            cost::charge(t, DMA_SETUP, 1);
            t.load(self.src.rec_addr(tb), it, 0, tl * w).await?;
            t.wram(|wr| {
                let words = wr.slice(it);
                for r in 0..tl {
                    let k = words[r * w];
                    if prev != Some(k) {
                        starts += 1;
                    }
                    prev = Some(k);
                }
            });
            cost::charge(t, KEY_CMP, tl as u64);
            cost::charge(t, LOOP, tl as u64);
            t.charge(WramLoad8, tl as u64);
        }
        Ok(starts)
    }

    async fn run(&self, t: Tasklet<'_>) -> Result<()> {
        let id = t.id();
        let (w, ow, m, n) = (self.src.w, self.out.w, self.m, self.src.len);
        let (it, ot, kslot) = (self.in_tiles[id], self.out_tiles[id], self.keys[id]);
        let (lo, hi) = share(n, t.count(), id);
        let starts = self.count_starts(&t, lo, hi).await?;
        let off = chain_offset(t, self.slot, starts as u64).await? as usize;
        // Input tile holds records [tb, tb + tl).
        let (mut tb, mut tl) = (0usize, 0usize);
        let mut i = lo;
        let mut groups = 0usize;
        let mut pending = 0usize;
        if lo < hi && lo > 0 {
            cost::charge(&t, DMA_SETUP, 1);
            t.load(self.src.rec_addr(lo - 1), kslot, 0, 1).await?;
            let prev = t.ld(kslot, 0);
            loop {
                if i >= tb + tl {
                    if i >= n {
                        break;
                    }
                    tb = i;
                    tl = m.min(n - i);
                    cost::charge(&t, DMA_SETUP, 1);
                    t.load(self.src.rec_addr(tb), it, 0, tl * w).await?;
                }
                cost::charge(&t, SCAN_STEP, 1);
                if t.ld(it, (i - tb) * w) != prev {
                    break;
                }
                i += 1;
            }
        }
        let mut lanes = vec![0u64; ow - 1];
        let mut rec = vec![0u64; w];
        while i < hi {
            // Start a group at record i.
            if i >= tb + tl {
                tb = i;
                tl = m.min(n - i);
                cost::charge(&t, DMA_SETUP, 1);
                t.load(self.src.rec_addr(tb), it, 0, tl * w).await?;
            }
            let key = t.wram(|wr| {
                rec.copy_from_slice(&wr.slice(it)[(i - tb) * w..(i - tb + 1) * w]);
                rec[0]
            });
            self.spec.init(&rec, &mut lanes);
            self.init.charge(&t, 1);
            i += 1;
            let mut runs = 0u64;
            loop {
                if i >= tb + tl {
                    if i >= n {
                        break;
                    }
                    tb = i;
                    tl = m.min(n - i);
                    cost::charge(&t, DMA_SETUP, 1);
                    t.load(self.src.rec_addr(tb), it, 0, tl * w).await?;
                }
                // Scan the rest of the tile for the end of the run.
                let (stop, used) = t.wram(|wr| {
                    let words = wr.slice(it);
                    let mut j = i - tb;
                    let mut mine = vec![0u64; ow - 1];
                    while j < tl && words[j * w] == key {
                        self.spec.init(&words[j * w..(j + 1) * w], &mut mine);
                        combine(&mut lanes, &mine);
                        j += 1;
                    }
                    (j < tl, j + tb - i)
                });
                runs += used as u64;
                i += used;
                if stop {
                    break;
                }
            }
            cost::charge(&t, SCAN_STEP, runs + 1);
            self.init.charge(&t, runs);
            self.comb.charge(&t, runs);
            t.wram(|wr| {
                let o = wr.slice_mut(ot);
                o[pending * ow] = key;
                o[pending * ow + 1..(pending + 1) * ow].copy_from_slice(&lanes);
            });
            cost::charge(&t, COPY_WORD, ow as u64);
            pending += 1;
            if pending == m {
                cost::charge(&t, DMA_SETUP, 1);
                t.store(ot, 0, pending * ow, self.out.rec_addr(off + groups)).await?;
                groups += pending;
                pending = 0;
            }
        }
        if pending > 0 {
            cost::charge(&t, DMA_SETUP, 1);
            t.store(ot, 0, pending * ow, self.out.rec_addr(off + groups)).await?;
            groups += pending;
        }
        if groups != starts {
            return Err(SimError::Internal(format!("tasklet {id} counted {starts} groups, wrote {groups}")));
        }
        Ok(())
    }
}

impl Kernel for GroupRunsKernel {
    fn name(&self) -> &'static str {
        "aggregate_sort"
    }

    fn setup(&mut self, wram: &mut Wram, info: LaunchInfo) -> Result<()> {
        let (w, ow) = (self.src.w, self.out.w);
        let shared = 8 + 8 * info.tasklets as u64;
        self.m = self.kcfg.tile_elems(&self.machine, 1, w + ow, shared, 1)?;
        self.slot = wram.alloc_words(1)?;
        for _ in 0..info.tasklets {
            self.in_tiles.push(wram.alloc_words(self.m * w)?);
            self.out_tiles.push(wram.alloc_words(self.m * ow)?);
            self.keys.push(wram.alloc_words(1)?);
        }
        Ok(())
    }

    fn tasklet<'a>(&'a self, t: Tasklet<'a>) -> TaskletFuture<'a> {
        Box::pin(self.run(t))
    }

    fn finish(&mut self, wram: &Wram) -> Result<()> {
        self.groups = if self.src.len == 0 { 0 } else { wram.get(self.slot, 0) as usize };
        Ok(())
    }
}

/// Sort-based aggregation: sorts each DPU's records in place by key, then
/// collapses equal-key runs. Returns the partial groups per DPU.
pub fn aggregate_sort(s: &mut Session, t: &DistTable, spec: &AggSpec) -> Result<DistTable> {
    check_spec(t, spec)?;
    s.ops.aggregation += spec.funcs.len();
    let ow = spec.out_w();
    let out = s.alloc(t.cap * ow)?;
    let mark = s.heap_mark();
    let scratch = s.alloc(t.cap * t.w().max(ow))?;
    let (m, k) = (s.machine.clone(), s.opts.kernel.clone());
    let tn = s.tasklets();
    let rows = s.per_dpu(|d, dpu| {
        let arr = t.array(d);
        let sort = SortKernel::new(&m, &k, arr, SortMode::Sort { scratch: Some(scratch) });
        let (_, m1) = run_on_dpu(&m, dpu, tn, sort)?;
        let g = GroupRunsKernel::new(&m, &k, arr, out, spec);
        let (g, m2) = run_on_dpu(&m, dpu, tn, g)?;
        Ok((g.groups, vec![m1, m2]))
    })?;
    s.heap_release(mark);
    Ok(DistTable { cols: out_names(spec, &t.cols[0]), addr: out, cap: t.cap, rows })
}

/// Hash aggregation into scratchpad tables shared by all tasklets.
///
/// The scratchpad holds `sub` tables, each guarded by its own mutex and
/// chosen by the top bits of the key hash. The input is a list of record
/// ranges, aggregated one after the other, of either raw records or
/// partial aggregates (key then lanes). When a record finds its table
/// full, either the record is written back over the tasklet's own input
/// share, for another pass once the tables are emptied to the output, or,
/// with a spill area set, the table's partial aggregates are moved there
/// and the table starts over. Tables that were ever evicted also end in
/// the spill area, so a key reaches the output at most once.
pub struct HashAggKernel {
    src: MramArray,
    out: MramArray,
    spec: AggSpec,
    init: ClassCounts,
    comb: ClassCounts,
    machine: MachineConfig,
    kcfg: KernelConfig,
    ranges: Vec<(usize, usize)>,
    out_base: usize,
    spill: Option<MramArray>,
    partial: bool,
    m: usize,
    mo: usize,
    sub: usize,
    sub_bits: u32,
    cap: usize,
    tiles: Vec<WramRegion>,
    out_tiles: Vec<WramRegion>,
    tables: Vec<WramRegion>,
    /// Output cursor, then spill cursor.
    cursor: WramRegion,
    residue: WramRegion,
    evicted: WramRegion,
    /// Output records written, counting from zero rather than `out_base`.
    pub groups: usize,
    pub spilled: usize,
    pub passes: usize,
    passes_seen: std::cell::Cell<usize>,
}

/// Input records per tasklet tile.
const HASH_AGG_TILE: usize = 32;
/// Output records per tasklet tile.
const HASH_AGG_OUT_TILE: usize = 16;

impl HashAggKernel {
    pub fn new(machine: &MachineConfig, kcfg: &KernelConfig, src: MramArray, out: u64, spec: &AggSpec) -> Self {
        HashAggKernel {
            src,
            out: MramArray::new(out, src.len, spec.out_w()),
            init: spec.init_mix(),
            comb: spec.combine_mix(),
            spec: spec.clone(),
            machine: machine.clone(),
            kcfg: kcfg.clone(),
            ranges: vec![(0, src.len)],
            out_base: 0,
            spill: None,
            partial: false,
            m: 0,
            mo: 0,
            sub: 0,
            sub_bits: 0,
            cap: 0,
            tiles: Vec::new(),
            out_tiles: Vec::new(),
            tables: Vec::new(),
            cursor: WramRegion::default(),
            residue: WramRegion::default(),
            evicted: WramRegion::default(),
            groups: 0,
            spilled: 0,
            passes: 0,
            passes_seen: Default::default(),
        }
    }

    /// Runs a single pass, evicting full tables as partial aggregates to
    /// `addr`, which must hold `src.len` output-width records.
    pub fn with_spill(mut self, addr: u64) -> Self {
        self.spill = Some(MramArray::new(addr, self.src.len, self.out.w));
        self
    }

    /// Treats the input as partial aggregates of output width.
    pub fn partial(mut self) -> Self {
        self.partial = true;
        self
    }

    /// Aggregates each of `ranges` separately, writing output from record
    /// `out_base` on.
    pub fn over_ranges(mut self, ranges: Vec<(usize, usize)>, out_base: usize) -> Self {
        self.ranges = ranges;
        self.out_base = out_base;
        self.out.len += out_base;
        self
    }

    /// Entries one sub-table holds before it counts as full.
    pub fn table_entries(&self) -> usize {
        ((self.cap as f64 * self.kcfg.ht_fill_max).floor() as usize).clamp(1, self.cap)
    }

    /// Entries all sub-tables hold together; known after the launch.
    pub fn total_entries(&self) -> usize {
        self.sub * self.table_entries()
    }

    /// Hash bits that pick the sub-table; known after the launch.
    pub fn sub_bits(&self) -> u32 {
        self.sub_bits
    }

    async fn reserve(&self, t: &Tasklet<'_>, slot: usize, cnt: usize) -> Result<usize> {
        t.lock(0).await?;
        let off = t.ld(self.cursor, slot) as usize;
        t.st(self.cursor, slot, (off + cnt) as u64);
        cost::charge(t, cost::COUNTER_INC, 1);
        t.unlock(0).await?;
        cost::charge(t, DMA_SETUP, 1);
        Ok(off)
    }

    /// Appends `cnt` records of the tile to the output (`spill` false) or
    /// the spill area.
    async fn flush(&self, t: &Tasklet<'_>, ot: WramRegion, cnt: usize, spill: bool) -> Result<()> {
        if cnt == 0 {
            return Ok(());
        }
        let (slot, dst) = match self.spill {
            Some(a) if spill => (1, a),
            _ => (0, self.out),
        };
        let off = self.reserve(t, slot, cnt).await?;
        t.store(ot, 0, cnt * self.out.w, dst.rec_addr(off)).await
    }

    /// Moves the entries of sub-table `s` through the tile to the output or
    /// the spill area and leaves the table empty.
    async fn empty_table(&self, t: &Tasklet<'_>, s: usize, ot: WramRegion, spill: bool) -> Result<()> {
        let (ow, lanes, fill) = (self.out.w, self.out.w - 1, self.kcfg.ht_fill_max);
        let occupied: Vec<u64> = t.wram(|wr| -> Result<Vec<u64>> {
            let mut ht = SpmHashTable::attach(wr.slice_mut(self.tables[s]), self.cap, lanes, fill)?;
            let mut v = Vec::new();
            for slot in ht.occupied() {
                v.push(ht.key_at(slot) as u64);
                v.extend_from_slice(ht.payload(slot));
            }
            ht.clear();
            Ok(v)
        })?;
        cost::charge(t, &[(WramLoad8, 1), (Cmp, 2), (Branch, 1), (Add32, 1)], self.cap as u64);
        cost::charge(t, &[(WramStore8, 1), (Add32, 1)], self.cap as u64 + 1);
        let mut cnt = 0usize;
        for e in occupied.chunks(ow) {
            t.wram(|wr| wr.slice_mut(ot)[cnt * ow..(cnt + 1) * ow].copy_from_slice(e));
            cost::charge(t, COPY_WORD, ow as u64);
            cnt += 1;
            if cnt == self.mo {
                self.flush(t, ot, cnt, spill).await?;
                cnt = 0;
            }
        }
        self.flush(t, ot, cnt, spill).await
    }

    /// Empties this tasklet's sub-tables; evicted ones go to the spill area.
    async fn drain(&self, t: &Tasklet<'_>, ot: WramRegion) -> Result<()> {
        let (id, tn) = (t.id(), t.count());
        for s in (id..self.sub).step_by(tn) {
            let spill = self.spill.is_some() && t.ld(self.evicted, s) != 0;
            cost::charge(t, &[(WramLoad8, 1), (Branch, 1)], 1);
            self.empty_table(t, s, ot, spill).await?;
        }
        Ok(())
    }

    /// Aggregates `len` records from `lo` for one pass; returns how many
    /// found their table full.
    async fn pass(&self, t: &Tasklet<'_>, lo: usize, len: usize, rec_lanes: &mut [u64]) -> Result<usize> {
        let (w, ow, m, lanes) = (self.src.w, self.out.w, self.m, self.out.w - 1);
        let (tile, ot) = (self.tiles[t.id()], self.out_tiles[t.id()]);
        let fill = self.kcfg.ht_fill_max;
        let mut kept_total = 0usize;
        let mut rec = vec![0u64; w];
        let mut i = 0;
        while i < len {
            let l = m.min(len - i);
            cost::charge(t, DMA_SETUP, 1);
            t.load(self.src.rec_addr(lo + i), tile, 0, l * w).await?;
            let mut kept = 0usize;
            for r in 0..l {
                t.wram(|wr| rec.copy_from_slice(&wr.slice(tile)[r * w..(r + 1) * w]));
                let key = rec[0] as i64;
                let s = if self.sub_bits == 0 { 0 } else { (hash32(key) >> (32 - self.sub_bits)) as usize };
                cost::charge(t, HASH32_COST, 1);
                cost::charge(t, &[(Logic32, 1), (WramLoad8, 1)], 1);
                if self.partial {
                    rec_lanes.copy_from_slice(&rec[1..]);
                    cost::charge(t, COPY_WORD, lanes as u64);
                } else {
                    self.spec.init(&rec, rec_lanes);
                    self.init.charge(t, 1);
                }
                t.lock(1 + s).await?;
                let insert = |wr: &mut Wram, lanes_in: &[u64]| -> Result<(Insert, u64)> {
                    let mut ht = SpmHashTable::attach(wr.slice_mut(self.tables[s]), self.cap, lanes, fill)?;
                    Ok(ht.insert(key, lanes_in, OnDuplicate::Combine(&|a, b| combine(a, b))))
                };
                let (mut res, probes) = t.wram(|wr| insert(wr, rec_lanes))?;
                cost::charge(t, PROBE_STEP, probes);
                if res == Insert::Full && self.spill.is_some() {
                    self.empty_table(t, s, ot, true).await?;
                    t.st(self.evicted, s, 1);
                    cost::charge(t, &[(WramStore8, 1)], 1);
                    let (r2, p2) = t.wram(|wr| insert(wr, rec_lanes))?;
                    cost::charge(t, PROBE_STEP, p2);
                    res = r2;
                }
                match res {
                    Insert::Aggregated(_) => self.comb.charge(t, 1),
                    Insert::Inserted(_) => cost::charge(t, COPY_WORD, ow as u64),
                    Insert::Full => {}
                }
                t.unlock(1 + s).await?;
                if res == Insert::Full {
                    if kept != r {
                        t.wram(|wr| wr.slice_mut(tile).copy_within(r * w..(r + 1) * w, kept * w));
                        cost::charge(t, COPY_WORD, w as u64);
                    }
                    kept += 1;
                }
                cost::charge(t, LOOP, 1);
            }
            if kept > 0 {
                cost::charge(t, DMA_SETUP, 1);
                t.store(tile, 0, kept * w, self.src.rec_addr(lo + kept_total)).await?;
                kept_total += kept;
            }
            i += l;
        }
        Ok(kept_total)
    }

    async fn run(&self, t: Tasklet<'_>) -> Result<()> {
        let (id, tn, lanes) = (t.id(), t.count(), self.out.w - 1);
        if self.partial && self.src.w != self.out.w {
            return Err(SimError::Internal("partial aggregates must have output width".into()));
        }
        let ot = self.out_tiles[id];
        let fill = self.kcfg.ht_fill_max;
        if id == 0 {
            t.st(self.cursor, 0, self.out_base as u64);
            t.st(self.cursor, 1, 0);
        }
        for s in (id..self.sub).step_by(tn) {
            t.st(self.evicted, s, 0);
        }
        let mut rec_lanes = vec![0u64; lanes];
        let mut most = 0usize;
        for &(start, end) in &self.ranges {
            let (lo, hi) = share(end - start, tn, id);
            let (lo, mut len) = (start + lo, hi - lo);
            let bound = (end - start) / self.table_entries() + 1;
            let mut passes = 0usize;
            loop {
                passes += 1;
                if passes > bound + 1 {
                    return Err(SimError::Internal(format!("hash aggregation exceeded {bound} passes")));
                }
                for s in (id..self.sub).step_by(tn) {
                    t.wram(|wr| -> Result<()> {
                        SpmHashTable::attach(wr.slice_mut(self.tables[s]), self.cap, lanes, fill)?.clear();
                        Ok(())
                    })?;
                    cost::charge(&t, &[(WramStore8, 1), (Add32, 1)], self.cap as u64 + 1);
                }
                t.barrier().await?;
                let kept = self.pass(&t, lo, len, &mut rec_lanes).await?;
                t.barrier().await?;
                self.drain(&t, ot).await?;
                if self.spill.is_some() {
                    break;
                }
                t.st(self.residue, id, kept as u64);
                cost::charge(&t, &[(WramStore8, 1)], 1);
                t.barrier().await?;
                let left: u64 = (0..tn).map(|j| t.ld(self.residue, j)).sum();
                cost::charge(&t, &[(WramLoad8, 1), (Add64, 1)], tn as u64);
                len = kept;
                if left == 0 {
                    break;
                }
                // Everyone has read the totals before the next pass overwrites them.
                t.barrier().await?;
            }
            most = most.max(passes);
        }
        if id == 0 {
            self.passes_seen.set(most);
        }
        Ok(())
    }
}

impl Kernel for HashAggKernel {
    fn name(&self) -> &'static str {
        "aggregate_hash"
    }

    fn setup(&mut self, wram: &mut Wram, info: LaunchInfo) -> Result<()> {
        let tn = info.tasklets;
        let (w, ow) = (self.src.w, self.out.w);
        self.sub = (2 * tn).next_power_of_two();
        self.sub_bits = self.sub.trailing_zeros();
        // Tiles take at most half the scratchpad; the tables get the rest.
        let words = (self.machine.wram_budget(tn) / 8) as usize;
        self.m = (words / (2 * tn * (w + ow))).clamp(1, HASH_AGG_TILE.min(self.kcfg.buffer_elems));
        self.mo = self.m.min(HASH_AGG_OUT_TILE);
        self.cursor = wram.alloc_words(2)?;
        self.residue = wram.alloc_words(tn)?;
        self.evicted = wram.alloc_words(self.sub)?;
        for _ in 0..tn {
            self.tiles.push(wram.alloc_words(self.m * w)?);
            self.out_tiles.push(wram.alloc_words(self.mo * ow)?);
        }
        let per_table = (wram.available() / 8) as usize / self.sub;
        self.cap = SpmHashTable::capacity_for(per_table, ow - 1);
        if self.cap < 2 {
            return Err(SimError::ScratchpadExhausted {
                requested: (self.sub * SpmHashTable::words_needed(2, ow - 1) * 8) as u64,
                available: wram.available(),
            });
        }
        let words = SpmHashTable::words_needed(self.cap, ow - 1);
        let all = wram.alloc_words(words * self.sub)?;
        self.tables = (0..self.sub).map(|s| all.sub(s * words, words)).collect();
        Ok(())
    }

    fn tasklet<'a>(&'a self, t: Tasklet<'a>) -> TaskletFuture<'a> {
        Box::pin(self.run(t))
    }

    fn finish(&mut self, wram: &Wram) -> Result<()> {
        self.groups = wram.get(self.cursor, 0) as usize - self.out_base;
        self.spilled = wram.get(self.cursor, 1) as usize;
        self.passes = self.passes_seen.get();
        Ok(())
    }
}

/// Per-DPU hash aggregation of `arr` into `out` by repeated passes; `arr`
/// is overwritten by spilled records. Returns (groups, passes, metrics).
pub fn hash_aggregate_dpu(
    machine: &MachineConfig,
    dpu: &mut crate::machine::Dpu,
    arr: MramArray,
    out: u64,
    spec: &AggSpec,
    kcfg: &KernelConfig,
) -> Result<(usize, usize, KernelMetrics)> {
    let k = HashAggKernel::new(machine, kcfg, arr, out, spec);
    let (k, m) = run_on_dpu(machine, dpu, kcfg.tasklets, k)?;
    Ok((k.groups, k.passes, m))
}

/// Per-DPU hybrid hash aggregation: one pass over `arr` that evicts full
/// tables, then the evicted partial aggregates are radix partitioned on
/// the hash bits below those choosing the sub-table, into groups of about
/// half the table space, and each group is combined on its own. `spill`
/// and `scratch` hold `arr.len` output-width records each. Returns
/// (groups, metrics).
#[allow(clippy::too_many_arguments)]
pub fn hybrid_aggregate_dpu(
    machine: &MachineConfig,
    dpu: &mut crate::machine::Dpu,
    arr: MramArray,
    out: u64,
    spill: u64,
    scratch: u64,
    spec: &AggSpec,
    kcfg: &KernelConfig,
) -> Result<(usize, Vec<KernelMetrics>)> {
    let k = HashAggKernel::new(machine, kcfg, arr, out, spec).with_spill(spill);
    let (k1, m1) = run_on_dpu(machine, dpu, kcfg.tasklets, k)?;
    let mut mets = vec![m1];
    if k1.spilled == 0 {
        return Ok((k1.groups, mets));
    }
    let region = MramArray::new(spill, k1.spilled, spec.out_w());
    let skip = k1.sub_bits();
    let target = (k1.total_entries() / 2).max(1);
    let bits = k1.spilled.div_ceil(target).max(2).next_power_of_two().trailing_zeros().clamp(1, 24.min(32 - skip));
    let bpp = kcfg.radix_buckets.trailing_zeros().clamp(1, bits);
    let r = radix_partition_below(machine, dpu, region, scratch, skip, bits, bpp, kcfg)?;
    mets.extend(r.metrics);
    let src = if r.in_scratch { MramArray { addr: scratch, ..region } } else { region };
    let ranges: Vec<(usize, usize)> = r.bounds.windows(2).map(|b| (b[0], b[1])).filter(|b| b.1 > b.0).collect();
    let k = HashAggKernel::new(machine, kcfg, src, out, spec).partial().over_ranges(ranges, k1.groups);
    let (k2, m2) = run_on_dpu(machine, dpu, kcfg.tasklets, k)?;
    mets.push(m2);
    Ok((k1.groups + k2.groups, mets))
}

/// Hash aggregation with partitioned overflow. Returns partial groups
/// per DPU.
pub fn aggregate_hash(s: &mut Session, t: &DistTable, spec: &AggSpec) -> Result<DistTable> {
    check_spec(t, spec)?;
    s.ops.aggregation += spec.funcs.len();
    let out = s.alloc(t.cap * spec.out_w())?;
    let mark = s.heap_mark();
    let spill = s.alloc(t.cap * spec.out_w())?;
    let scratch = s.alloc(t.cap * spec.out_w())?;
    let (m, k) = (s.machine.clone(), s.opts.kernel.clone());
    let rows = s.per_dpu(|d, dpu| hybrid_aggregate_dpu(&m, dpu, t.array(d), out, spill, scratch, spec, &k))?;
    s.heap_release(mark);
    Ok(DistTable { cols: out_names(spec, &t.cols[0]), addr: out, cap: t.cap, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::host::SessionOptions;
    use crate::ops::table::{load_rows, peek_rows};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn session(dpus: usize, tasklets: usize) -> Session {
        let m = MachineConfig::desk().with_dpus(dpus);
        let mut o = SessionOptions::default();
        o.kernel.tasklets = tasklets;
        Session::new(&m, o).unwrap()
    }

    fn oracle(rows: &[Vec<u64>], spec: &AggSpec) -> BTreeMap<i64, Vec<u64>> {
        let mut out: BTreeMap<i64, Vec<u64>> = BTreeMap::new();
        let mut l = vec![0; spec.lanes()];
        for r in rows {
            spec.init(r, &mut l);
            match out.get_mut(&(r[0] as i64)) {
                Some(a) => combine(a, &l),
                None => {
                    out.insert(r[0] as i64, l.clone());
                }
            }
        }
        out
    }

    fn run(
        s: &mut Session,
        per: &[Vec<u64>],
        spec: &AggSpec,
        hash: bool,
    ) -> (BTreeMap<i64, Vec<u64>>, Vec<Vec<Vec<i64>>>) {
        let t = load_rows(s, &["k", "v"], per).unwrap();
        let r = if hash { aggregate_hash(s, &t, spec) } else { aggregate_sort(s, &t, spec) }.unwrap();
        let parts = peek_rows(s, &r).unwrap();
        (merge_partials(&parts.concat()), parts)
    }

    #[test]
    fn tiny_examples() {
        let spec = AggSpec::new(vec![AggFn::Sum(1)]);
        let per = vec![vec![1, 10, 1, 20, 2, 5]];
        for hash in [false, true] {
            let mut s = session(1, 4);
            let (g, _) = run(&mut s, &per, &spec, hash);
            assert_eq!(g, BTreeMap::from([(1, vec![30]), (2, vec![5])]));
        }
        let count = AggSpec::new(vec![AggFn::Count]);
        let mut s = session(1, 2);
        let (g, _) = run(&mut s, &per, &count, true);
        assert_eq!(g, BTreeMap::from([(1, vec![2]), (2, vec![1])]));
    }

    #[test]
    fn random_matches_oracle_both_algorithms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = AggSpec::new(vec![AggFn::Unique, AggFn::Count, AggFn::Sum(1), AggFn::Avg(1)]);
        for &(dpus, tn, groups) in &[(1, 1, 5u64), (2, 16, 50), (3, 11, 3000), (4, 24, 1 << 20), (1, 16, 40_000)] {
            let per: Vec<Vec<u64>> = (0..dpus)
                .map(|_| {
                    let n = rng.gen_range(0..20_000);
                    (0..n).flat_map(|_| [rng.gen_range(0..groups), rng.gen_range(0..1000)]).collect()
                })
                .collect();
            let all: Vec<Vec<u64>> = per.iter().flat_map(|p| p.chunks(2).map(|c| c.to_vec())).collect();
            let want = oracle(&all, &spec);
            for hash in [false, true] {
                let mut s = session(dpus, tn);
                let (got, parts) = run(&mut s, &per, &spec, hash);
                assert_eq!(got, want, "dpus {dpus} tasklets {tn} groups {groups} hash {hash}");
                for p in &parts {
                    let mut keys: Vec<i64> = p.iter().map(|r| r[0]).collect();
                    keys.sort();
                    let n = keys.len();
                    keys.dedup();
                    assert_eq!(keys.len(), n, "a DPU emitted a key twice");
                }
            }
        }
    }

    #[test]
    fn few_keys_take_one_hash_pass() {
        let m = MachineConfig::desk();
        let k = KernelConfig::default();
        let mut d = crate::machine::Dpu::new(0, m.mram_bytes, m.wram_bytes);
        let words: Vec<u64> = (0..10_000u64).flat_map(|i| [i % 50, i]).collect();
        d.mram.write(0, &words).unwrap();
        let spec = AggSpec::new(vec![AggFn::Count]);
        let (g, passes, _) = hash_aggregate_dpu(&m, &mut d, MramArray::new(0, 10_000, 2), 1 << 20, &spec, &k).unwrap();
        assert_eq!((g, passes), (50, 1));
        let words: Vec<u64> = (0..20_000u64).flat_map(|i| [i, i]).collect();
        d.mram.write(0, &words).unwrap();
        let (g, passes, _) = hash_aggregate_dpu(&m, &mut d, MramArray::new(0, 20_000, 2), 1 << 20, &spec, &k).unwrap();
        assert_eq!(g, 20_000);
        assert!(passes > 1);
    }

    #[test]
    fn overflow_is_evicted_partitioned_and_combined_once() {
        let m = MachineConfig::desk();
        let k = KernelConfig { tasklets: 8, ..KernelConfig::default() };
        let mut d = crate::machine::Dpu::new(0, m.mram_bytes, m.wram_bytes);
        let n = 30_000u64;
        let words: Vec<u64> = (0..n).flat_map(|i| [(i * 7919) % 9000, 1]).collect();
        d.mram.write(0, &words).unwrap();
        let spec = AggSpec::new(vec![AggFn::Sum(1)]);
        let (out, spill, scratch) = (1 << 20, 2 << 20, 3 << 20);
        let (g, mets) = hybrid_aggregate_dpu(&m, &mut d, MramArray::new(0, n as usize, 2), out, spill, scratch, &spec, &k).unwrap();
        assert_eq!(g, 9000);
        assert!(mets.iter().any(|x| x.kernel == "radix_partition_pass"), "overflow went through partitioning");
        let got = d.mram.read_vec(out, g * 2).unwrap();
        let mut sums: BTreeMap<u64, u64> = BTreeMap::new();
        for r in got.chunks(2) {
            assert!(sums.insert(r[0], r[1]).is_none(), "key {} emitted twice", r[0]);
        }
        let mut want: BTreeMap<u64, u64> = BTreeMap::new();
        for c in words.chunks(2) {
            *want.entry(c[0]).or_default() += c[1];
        }
        assert_eq!(sums, want);
        // Few keys never spill.
        let words: Vec<u64> = (0..n).flat_map(|i| [i % 40, 1]).collect();
        d.mram.write(0, &words).unwrap();
        let (g, mets) = hybrid_aggregate_dpu(&m, &mut d, MramArray::new(0, n as usize, 2), out, spill, scratch, &spec, &k).unwrap();
        assert_eq!((g, mets.len()), (40, 1));
    }

    #[test]
    fn finalize_averages() {
        let spec = AggSpec::new(vec![AggFn::Avg(1), AggFn::Count]);
        assert_eq!(spec.finalize(&[7, 2, 2]), vec![3, 2]);
        assert_eq!(spec.finalize(&[(-7i64) as u64, 2, 2]), vec![-3, 2]);
    }
}
