//! Quicksort over bank memory using two scratchpad buffers per tasklet, the
//! multi-tasklet partitioning step that feeds it, and the in-scratchpad sort
//! used for small subranges.

use super::config::KernelConfig;
use super::cost::{self, COPY_WORD, DMA_SETUP, KEY_CMP, LOOP, SCAN_STEP, SWAP_WORD};
use super::prefix::charge_prefix;
use crate::error::{Result, SimError};
use crate::machine::{
    run_on_dpu, Dpu, Kernel, KernelMetrics, LaunchInfo, MachineConfig, Tasklet, TaskletFuture, Wram,
    WramRegion,
};

/// An array of `len` records of `w` words at byte address `addr` in bank memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MramArray {
    pub addr: u64,
    pub len: usize,
    pub w: usize,
}

impl MramArray {
    pub fn new(addr: u64, len: usize, w: usize) -> Self {
        MramArray { addr, len, w }
    }

    pub fn bytes(&self) -> u64 {
        (self.len * self.w * 8) as u64
    }

    pub fn rec_addr(&self, i: usize) -> u64 {
        self.addr + (i * self.w * 8) as u64
    }
}

/// Operation counts of a scratchpad sort or partition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SortOps {
    pub compares: u64,
    pub swaps: u64,
}

impl SortOps {
    pub fn charge(&self, t: &Tasklet<'_>, w: usize) {
        cost::charge(t, SCAN_STEP, self.compares);
        cost::charge(t, SWAP_WORD, self.swaps * w as u64);
    }
}

#[inline]
fn k(words: &[u64], w: usize, i: usize) -> i64 {
    words[i * w] as i64
}

#[inline]
fn swap_rec(words: &mut [u64], w: usize, a: usize, b: usize) {
    if a != b {
        for x in 0..w {
            words.swap(a * w + x, b * w + x);
        }
    }
}

const INSERTION_CUTOFF: usize = 12;

/// Sorts packed `w`-word records by key in place, counting operations.
/// Iterative quicksort with median-of-three pivots; short ranges use
/// insertion sort.
pub fn wram_sort(words: &mut [u64], w: usize) -> SortOps {
    let n = words.len() / w;
    let mut ops = SortOps::default();
    let mut stack: Vec<(usize, usize)> = Vec::new();
    let (mut lo, mut hi) = (0usize, n);
    loop {
        if hi - lo <= INSERTION_CUTOFF {
            for i in lo + 1..hi {
                let mut j = i;
                while j > lo {
                    ops.compares += 1;
                    if k(words, w, j - 1) <= k(words, w, j) {
                        break;
                    }
                    swap_rec(words, w, j - 1, j);
                    ops.swaps += 1;
                    j -= 1;
                }
            }
            match stack.pop() {
                Some(r) => {
                    (lo, hi) = r;
                    continue;
                }
                None => break,
            }
        }
        let mid = lo + (hi - lo) / 2;
        let med = median_of_three(k(words, w, lo), k(words, w, mid), k(words, w, hi - 1), lo, mid, hi - 1);
        ops.compares += 3;
        swap_rec(words, w, lo, med);
        ops.swaps += 1;
        let p = k(words, w, lo);
        let (mut i, mut j) = (lo as isize - 1, hi as isize);
        let j = loop {
            loop {
                i += 1;
                ops.compares += 1;
                if k(words, w, i as usize) >= p {
                    break;
                }
            }
            loop {
                j -= 1;
                ops.compares += 1;
                if k(words, w, j as usize) <= p {
                    break;
                }
            }
            if i >= j {
                break j as usize;
            }
            swap_rec(words, w, i as usize, j as usize);
            ops.swaps += 1;
        };
        let (a, b) = ((lo, j + 1), (j + 1, hi));
        if a.1 - a.0 >= b.1 - b.0 {
            stack.push(a);
            (lo, hi) = b;
        } else {
            stack.push(b);
            (lo, hi) = a;
        }
    }
    ops
}

fn median_of_three(a: i64, b: i64, c: i64, ia: usize, ib: usize, ic: usize) -> usize {
    if (a <= b) == (b <= c) {
        ib
    } else if (b <= a) == (a <= c) {
        ia
    } else {
        ic
    }
}

/// Moves records with key < `p` in front of the others. Returns the count
/// of smaller records.
pub fn wram_strict_partition(words: &mut [u64], w: usize, p: i64, ops: &mut SortOps) -> usize {
    let n = words.len() / w;
    let (mut i, mut j) = (0usize, n);
    loop {
        while i < j {
            ops.compares += 1;
            if k(words, w, i) < p {
                i += 1;
            } else {
                break;
            }
        }
        while i < j {
            ops.compares += 1;
            if k(words, w, j - 1) >= p {
                j -= 1;
            } else {
                break;
            }
        }
        if i >= j {
            return i;
        }
        swap_rec(words, w, i, j - 1);
        ops.swaps += 1;
        i += 1;
        j -= 1;
    }
}

/// Splits `words` by sorted `splitters` into `splitters.len() + 1` buckets
/// (bucket b holds keys in `[splitters[b-1], splitters[b])`). Returns the
/// bucket boundaries, `splitters.len() + 2` entries.
pub fn wram_multi_partition(words: &mut [u64], w: usize, splitters: &[i64], ops: &mut SortOps) -> Vec<usize> {
    let buckets = splitters.len() + 1;
    let mut bounds = vec![0usize; buckets + 1];
    bounds[buckets] = words.len() / w;
    let mut stack = vec![(0usize, words.len() / w, 0usize, buckets - 1)];
    while let Some((lo, hi, blo, bhi)) = stack.pop() {
        if blo == bhi {
            continue;
        }
        let s = (blo + bhi) / 2;
        let pos = lo + wram_strict_partition(&mut words[lo * w..hi * w], w, splitters[s], ops);
        bounds[s + 1] = pos;
        stack.push((lo, pos, blo, s));
        stack.push((pos, hi, s + 1, bhi));
    }
    bounds
}

/// Two scratchpad buffers caching the left and right ends of a range of
/// bank memory while a Hoare-style scan moves inward. The left buffer holds
/// `[la, lb)`, the right `[ra, rb)`, with `lb <= ra`; when a cursor leaves its
/// buffer the buffer is written back and refilled from the unread middle.
struct Window<'a> {
    t: Tasklet<'a>,
    arr: MramArray,
    m: usize,
    lbuf: WramRegion,
    rbuf: WramRegion,
    la: usize,
    lb: usize,
    ra: usize,
    rb: usize,
}

impl<'a> Window<'a> {
    async fn open(t: Tasklet<'a>, arr: MramArray, m: usize, buf: WramRegion, lo: usize, hi: usize) -> Result<Self> {
        let w = arr.w;
        let lbuf = buf.sub(0, m * w);
        let rbuf = buf.sub(m * w, m * w);
        let lb = (lo + m).min(hi);
        let ra = hi.saturating_sub(m).max(lb);
        let mut win = Window { t, arr, m, lbuf, rbuf, la: lo, lb, ra, rb: hi };
        win.load(true).await?;
        win.load(false).await?;
        Ok(win)
    }

    async fn load(&mut self, left: bool) -> Result<()> {
        let (buf, a, b) = if left { (self.lbuf, self.la, self.lb) } else { (self.rbuf, self.ra, self.rb) };
        if b > a {
            cost::charge(&self.t, DMA_SETUP, 1);
            self.t.load(self.arr.rec_addr(a), buf, 0, (b - a) * self.arr.w).await?;
        }
        Ok(())
    }

    async fn store(&mut self, left: bool) -> Result<()> {
        let (buf, a, b) = if left { (self.lbuf, self.la, self.lb) } else { (self.rbuf, self.ra, self.rb) };
        if b > a {
            cost::charge(&self.t, DMA_SETUP, 1);
            self.t.store(buf, 0, (b - a) * self.arr.w, self.arr.rec_addr(a)).await?;
        }
        Ok(())
    }

    /// Makes index `i` of the left cursor resident.
    async fn reach_left(&mut self, i: usize) -> Result<()> {
        if i >= self.lb && self.lb < self.ra {
            self.store(true).await?;
            self.la = self.lb;
            self.lb = (self.lb + self.m).min(self.ra);
            self.load(true).await?;
        }
        Ok(())
    }

    /// Makes index `j` of the right cursor resident.
    async fn reach_right(&mut self, j: usize) -> Result<()> {
        if j < self.ra && self.ra > self.lb {
            self.store(false).await?;
            self.rb = self.ra;
            self.ra = self.ra.saturating_sub(self.m).max(self.lb);
            self.load(false).await?;
        }
        Ok(())
    }

    fn loc(&self, i: usize) -> (WramRegion, usize) {
        if (self.la..self.lb).contains(&i) {
            (self.lbuf, (i - self.la) * self.arr.w)
        } else if (self.ra..self.rb).contains(&i) {
            (self.rbuf, (i - self.ra) * self.arr.w)
        } else {
            panic!("index {i} not resident in window [{}, {}) [{}, {})", self.la, self.lb, self.ra, self.rb)
        }
    }

    fn key(&self, i: usize) -> i64 {
        let (r, o) = self.loc(i);
        self.t.ld(r, o) as i64
    }

    fn swap(&self, i: usize, j: usize) {
        let (ri, oi) = self.loc(i);
        let (rj, oj) = self.loc(j);
        let w = self.arr.w;
        self.t.wram(|wr| {
            for x in 0..w {
                let a = wr.get(ri, oi + x);
                let b = wr.get(rj, oj + x);
                wr.set(ri, oi + x, b);
                wr.set(rj, oj + x, a);
            }
        });
        cost::charge(&self.t, SWAP_WORD, w as u64);
    }

    fn resident(&self, i: usize) -> bool {
        (self.la..self.lb).contains(&i) || (self.ra..self.rb).contains(&i)
    }

    async fn close(mut self) -> Result<()> {
        self.store(true).await?;
        self.store(false).await
    }
}

/// Hoare partition of `[lo, hi)` around the median of its first, middle and
/// last keys. Returns `j` such that `[lo, j]` holds keys ≤ pivot and
/// `(j, hi)` keys ≥ pivot, both nonempty.
async fn hoare_level(
    t: Tasklet<'_>,
    arr: MramArray,
    m: usize,
    buf: WramRegion,
    slot: WramRegion,
    lo: usize,
    hi: usize,
) -> Result<usize> {
    let w = arr.w;
    let mut win = Window::open(t, arr, m, buf, lo, hi).await?;
    let mid = lo + (hi - lo) / 2;
    // The middle record usually lies between the buffers; fetch it.
    let mid_key = if win.resident(mid) {
        win.key(mid)
    } else {
        cost::charge(&t, DMA_SETUP, 1);
        t.load(arr.rec_addr(mid), slot, 0, w).await?;
        t.ld(slot, 0) as i64
    };
    cost::charge(&t, SCAN_STEP, 3);
    let med = median_of_three(win.key(lo), mid_key, win.key(hi - 1), lo, mid, hi - 1);
    if med == mid && !win.resident(mid) {
        // slot[0..w] = middle record; put the first record there instead.
        let (r, o) = win.loc(lo);
        t.wram(|wr| {
            for x in 0..w {
                let first = wr.get(r, o + x);
                let middle = wr.get(slot, x);
                wr.set(slot, w + x, first);
                wr.set(r, o + x, middle);
            }
        });
        cost::charge(&t, COPY_WORD, 2 * w as u64);
        cost::charge(&t, DMA_SETUP, 1);
        t.store(slot, w, w, arr.rec_addr(mid)).await?;
    } else if med != lo {
        win.swap(lo, med);
    }
    let p = win.key(lo);
    let mut i = lo as isize;
    let mut j = hi as isize;
    let split = loop {
        loop {
            win.reach_left(i as usize).await?;
            cost::charge(&t, SCAN_STEP, 1);
            if win.key(i as usize) < p {
                i += 1;
            } else {
                break;
            }
        }
        j -= 1;
        loop {
            if j < i {
                break;
            }
            win.reach_right(j as usize).await?;
            cost::charge(&t, SCAN_STEP, 1);
            if win.key(j as usize) > p {
                j -= 1;
            } else {
                break;
            }
        }
        if i >= j {
            break j as usize;
        }
        win.swap(i as usize, j as usize);
        i += 1;
    };
    win.close().await?;
    if split < lo || split + 1 >= hi {
        return Err(SimError::Internal(format!("degenerate partition {split} of [{lo}, {hi})")));
    }
    Ok(split)
}

/// Strict partition of `[lo, hi)`: keys < `p` first. Returns the boundary.
async fn strict_level(
    t: Tasklet<'_>,
    arr: MramArray,
    m: usize,
    buf: WramRegion,
    lo: usize,
    hi: usize,
    p: i64,
) -> Result<usize> {
    let mut win = Window::open(t, arr, m, buf, lo, hi).await?;
    let (mut i, mut j) = (lo, hi);
    loop {
        while i < j {
            win.reach_left(i).await?;
            cost::charge(&t, SCAN_STEP, 1);
            if win.key(i) < p {
                i += 1;
            } else {
                break;
            }
        }
        while i < j {
            win.reach_right(j - 1).await?;
            cost::charge(&t, SCAN_STEP, 1);
            if win.key(j - 1) >= p {
                j -= 1;
            } else {
                break;
            }
        }
        if i >= j {
            break;
        }
        win.swap(i, j - 1);
        i += 1;
        j -= 1;
    }
    win.close().await?;
    Ok(i)
}

/// Loads `[lo, hi)` of `src` (at most `2m` records), sorts it in the
/// scratchpad and writes it to the same positions of `dst`.
async fn leaf_sort(t: Tasklet<'_>, src: MramArray, dst: MramArray, buf: WramRegion, lo: usize, hi: usize) -> Result<()> {
    let w = src.w;
    let n = hi - lo;
    cost::charge(&t, DMA_SETUP, 1);
    t.load(src.rec_addr(lo), buf, 0, n * w).await?;
    let ops = t.wram(|wr| wram_sort(&mut wr.slice_mut(buf)[..n * w], w));
    ops.charge(&t, w);
    cost::charge(&t, DMA_SETUP, 1);
    t.store(buf, 0, n * w, dst.rec_addr(lo)).await
}

/// Iterative quicksort of `[lo, hi)` of `src`; subranges of at most `2m`
/// records are finished in the scratchpad and written to `dst`.
async fn sort_range(
    t: Tasklet<'_>,
    src: MramArray,
    dst: MramArray,
    m: usize,
    buf: WramRegion,
    slot: WramRegion,
    lo: usize,
    hi: usize,
) -> Result<()> {
    let mut stack: Vec<(usize, usize)> = Vec::new();
    let (mut lo, mut hi) = (lo, hi);
    loop {
        if hi - lo <= 2 * m {
            if hi > lo {
                leaf_sort(t, src, dst, buf, lo, hi).await?;
            }
            match stack.pop() {
                Some(r) => {
                    cost::charge(&t, LOOP, 1);
                    (lo, hi) = r;
                    continue;
                }
                None => return Ok(()),
            }
        }
        let j = hoare_level(t, src, m, buf, slot, lo, hi).await?;
        cost::charge(&t, LOOP, 2);
        let (a, b) = ((lo, j + 1), (j + 1, hi));
        if a.1 - a.0 >= b.1 - b.0 {
            stack.push(a);
            (lo, hi) = b;
        } else {
            stack.push(b);
            (lo, hi) = a;
        }
    }
}

/// Splits `[lo, hi)` of `arr` in place into `splitters.len() + 1` buckets.
/// Returns absolute bucket boundaries.
async fn split_range(
    t: Tasklet<'_>,
    arr: MramArray,
    m: usize,
    buf: WramRegion,
    lo: usize,
    hi: usize,
    splitters: &[i64],
) -> Result<Vec<usize>> {
    let w = arr.w;
    let buckets = splitters.len() + 1;
    let mut bounds = vec![lo; buckets + 1];
    bounds[buckets] = hi;
    let mut stack = vec![(lo, hi, 0usize, buckets - 1)];
    while let Some((lo, hi, blo, bhi)) = stack.pop() {
        if blo == bhi {
            continue;
        }
        if hi - lo <= 2 * m {
            // Finish this subtree with a single scratchpad round trip.
            let n = hi - lo;
            if n > 0 {
                cost::charge(&t, DMA_SETUP, 1);
                t.load(arr.rec_addr(lo), buf, 0, n * w).await?;
            }
            let mut ops = SortOps::default();
            let local = t.wram(|wr| wram_multi_partition(&mut wr.slice_mut(buf)[..n * w], w, &splitters[blo..bhi], &mut ops));
            ops.charge(&t, w);
            for (x, b) in local.iter().enumerate().take(bhi - blo + 1).skip(1) {
                bounds[blo + x] = lo + b;
            }
            if n > 0 {
                cost::charge(&t, DMA_SETUP, 1);
                t.store(buf, 0, n * w, arr.rec_addr(lo)).await?;
            }
            continue;
        }
        let s = (blo + bhi) / 2;
        let pos = strict_level(t, arr, m, buf, lo, hi, splitters[s]).await?;
        bounds[s + 1] = pos;
        cost::charge(&t, LOOP, 2);
        stack.push((lo, pos, blo, s));
        stack.push((pos, hi, s + 1, bhi));
    }
    Ok(bounds)
}

/// Copies records `[lo, hi)` of `src` to `dst` starting at record `at`,
/// staging through `buf` (capacity `cap` records).
pub(crate) async fn copy_records(
    t: Tasklet<'_>,
    src: MramArray,
    dst: MramArray,
    buf: WramRegion,
    cap: usize,
    lo: usize,
    hi: usize,
    at: usize,
) -> Result<()> {
    let w = src.w;
    let mut i = lo;
    while i < hi {
        let n = (hi - i).min(cap);
        cost::charge(&t, DMA_SETUP, 2);
        t.load(src.rec_addr(i), buf, 0, n * w).await?;
        t.store(buf, 0, n * w, dst.rec_addr(at + (i - lo))).await?;
        i += n;
    }
    Ok(())
}

/// Buckets per tasklet in the multi-tasklet sort.
pub const SORT_BUCKETS_PER_TASKLET: usize = 4;
/// Splitter candidates sampled per bucket.
pub const SORT_SAMPLES_PER_BUCKET: usize = 16;

#[derive(Debug, Clone)]
pub enum SortMode {
    /// Sort `src` in place, using `scratch` (same size) when present to let
    /// all tasklets work.
    Sort { scratch: Option<u64> },
    /// Partition `src` into `dst` by the given sorted splitters.
    Partition { dst: u64, splitters: Vec<i64> },
}

#[derive(Debug, Default, Clone, Copy)]
struct SharedBufs {
    /// All tasklet tiles, contiguous; doubles as the sample array.
    tiles: WramRegion,
    splitters: WramRegion,
    /// Running per-bucket totals passed along the tasklet chain.
    running: WramRegion,
    /// Bucket start offsets, `buckets + 1` words.
    starts: WramRegion,
    /// Bucket processing order.
    queue: WramRegion,
    next: WramRegion,
}

/// Sorts or partitions one array per DPU.
#[derive(Debug, Clone)]
pub struct SortKernel {
    pub src: MramArray,
    pub mode: SortMode,
    pub kcfg: KernelConfig,
    pub machine: MachineConfig,
    m: usize,
    buckets: usize,
    samples: usize,
    bufs: Vec<WramRegion>,
    slots: Vec<WramRegion>,
    shared: SharedBufs,
    /// Filled by `finish`: bucket boundaries of the output.
    pub bucket_bounds: Vec<usize>,
    /// Filled by `finish`: records each tasklet contributed to each bucket.
    pub tasklet_counts: Vec<Vec<u64>>,
    counts: std::cell::RefCell<Vec<Vec<u64>>>,
}

impl SortKernel {
    pub fn new(machine: &MachineConfig, kcfg: &KernelConfig, src: MramArray, mode: SortMode) -> Self {
        SortKernel {
            src,
            mode,
            kcfg: kcfg.clone(),
            machine: machine.clone(),
            m: 0,
            buckets: 0,
            samples: 0,
            bufs: Vec::new(),
            slots: Vec::new(),
            shared: SharedBufs::default(),
            bucket_bounds: Vec::new(),
            tasklet_counts: Vec::new(),
            counts: Default::default(),
        }
    }

    fn parallel(&self, tasklets: usize) -> bool {
        match &self.mode {
            SortMode::Sort { scratch } => scratch.is_some() && tasklets > 1 && self.src.len > 2 * self.m,
            SortMode::Partition { .. } => true,
        }
    }

    async fn run(&self, t: Tasklet<'_>) -> Result<()> {
        let id = t.id();
        let tn = t.count();
        let (buf, slot, m) = (self.bufs[id], self.slots[id], self.m);
        let n = self.src.len;
        if !self.parallel(tn) {
            if id == 0 && n > 1 {
                sort_range(t, self.src, self.src, m, buf, slot, 0, n).await?;
            }
            return Ok(());
        }
        let sh = self.shared;
        let b = self.buckets;
        let (dst, given) = match &self.mode {
            SortMode::Sort { scratch } => (scratch.expect("parallel sort has scratch"), None),
            SortMode::Partition { dst, splitters } => (*dst, Some(splitters)),
        };
        let out = MramArray { addr: dst, ..self.src };

        // Splitters: either given, or from an evenly spaced key sample held
        // in the (still unused) tile buffers.
        let splitters: Vec<i64> = match given {
            Some(s) => s.clone(),
            None => {
                // Every tasklet sorts its own run of samples, then places each
                // of them by global rank; ranks that land on a bucket
                // boundary become splitters.
                let s = self.samples;
                let per = s / b;
                let run = s / tn;
                let base = id * run;
                for i in 0..run {
                    let pos = ((2 * (base + i) + 1) * n) / (2 * s);
                    cost::charge(&t, DMA_SETUP, 1);
                    t.mram_read(self.src.rec_addr(pos), sh.tiles.addr(base + i), 8).await?;
                }
                let ops = t.wram(|wr| wram_sort(&mut wr.slice_mut(sh.tiles)[base..base + run], 1));
                ops.charge(&t, 1);
                t.barrier().await?;
                let mut steps = 0u64;
                for i in 0..run {
                    let v = t.ld(sh.tiles, base + i) as i64;
                    let mut rank = i;
                    for r in (0..tn).filter(|&r| r != id) {
                        // Earlier runs count ties as smaller, later ones do not.
                        let (mut lo, mut hi) = (0, run);
                        while lo < hi {
                            let mid = (lo + hi) / 2;
                            let u = t.ld(sh.tiles, r * run + mid) as i64;
                            if u < v || (r < id && u == v) {
                                lo = mid + 1;
                            } else {
                                hi = mid;
                            }
                            steps += 1;
                        }
                        rank += lo;
                    }
                    if rank > 0 && rank % per == 0 && rank / per < b {
                        t.st(sh.splitters, rank / per - 1, v as u64);
                    }
                }
                cost::charge(&t, KEY_CMP, steps);
                cost::charge(&t, LOOP, steps + (run * tn) as u64);
                t.barrier().await?;
                cost::charge(&t, COPY_WORD, (b - 1) as u64);
                t.wram(|wr| wr.slice(sh.splitters)[..b - 1].iter().map(|&v| v as i64).collect())
            }
        };

        // Each tasklet partitions its contiguous share in place.
        let lo = n * id / tn;
        let hi = n * (id + 1) / tn;
        let bounds = split_range(t, self.src, m, buf, lo, hi, &splitters).await?;
        let mine: Vec<u64> = (0..b).map(|x| (bounds[x + 1] - bounds[x]) as u64).collect();

        // Running totals travel along the tasklet chain; each tasklet keeps
        // the totals it received as its offsets within every bucket.
        if id > 0 {
            t.wait_for(id - 1).await?;
        }
        let before: Vec<u64> = (0..b)
            .map(|x| {
                let r = if id == 0 { 0 } else { t.ld(sh.running, x) };
                t.st(sh.running, x, r + mine[x]);
                r
            })
            .collect();
        cost::charge(&t, super::cost::COUNTER_INC, b as u64);
        if id + 1 < tn {
            t.notify().await?;
        }
        self.counts.borrow_mut()[id] = mine;
        t.barrier().await?;

        if id == 0 {
            // Bucket starts and a largest-first processing order.
            let mut acc = 0u64;
            for x in 0..b {
                let total = t.ld(sh.running, x);
                t.st(sh.starts, x, acc);
                t.st(sh.queue, x, ((-(total as i64)) << 20 | x as i64) as u64);
                acc += total;
            }
            t.st(sh.starts, b, acc);
            t.st(sh.next, 0, 0);
            charge_prefix(&t, b);
            let ops = t.wram(|wr| wram_sort(&mut wr.slice_mut(sh.queue)[..b], 1));
            ops.charge(&t, 1);
        }
        t.barrier().await?;

        // Scatter this tasklet's pieces to their final bucket positions.
        for x in 0..b {
            let at = (t.ld(sh.starts, x) + before[x]) as usize;
            cost::charge(&t, LOOP, 1);
            copy_records(t, self.src, out, buf, 2 * m, bounds[x], bounds[x + 1], at).await?;
        }
        if given.is_some() {
            return Ok(());
        }
        t.barrier().await?;

        // Sort buckets, largest first, writing the leaves back to `src`.
        loop {
            t.lock(0).await?;
            let q = t.ld(sh.next, 0) as usize;
            t.st(sh.next, 0, q as u64 + 1);
            cost::charge(&t, super::cost::COUNTER_INC, 1);
            t.unlock(0).await?;
            if q >= b {
                break;
            }
            let bucket = (t.ld(sh.queue, q) & 0xF_FFFF) as usize;
            let blo = t.ld(sh.starts, bucket) as usize;
            let bhi = t.ld(sh.starts, bucket + 1) as usize;
            cost::charge(&t, LOOP, 1);
            if bhi > blo {
                sort_range(t, out, self.src, m, buf, slot, blo, bhi).await?;
            }
        }
        Ok(())
    }
}

impl Kernel for SortKernel {
    fn name(&self) -> &'static str {
        match self.mode {
            SortMode::Sort { .. } => "quicksort",
            SortMode::Partition { .. } => "partition",
        }
    }

    fn setup(&mut self, wram: &mut Wram, info: LaunchInfo) -> Result<()> {
        let tn = info.tasklets;
        let w = self.src.w;
        let kc = self.kcfg.with_tasklets(tn);
        self.buckets = match &self.mode {
            SortMode::Sort { .. } => SORT_BUCKETS_PER_TASKLET * tn,
            SortMode::Partition { splitters, .. } => splitters.len() + 1,
        };
        if self.buckets >= 1 << 20 {
            return Err(SimError::Config(format!("{} buckets exceed the queue encoding", self.buckets)));
        }
        let b = self.buckets;
        let shared_words = 2 * b + 3;
        let slot_words = 2 * w;
        let shared_bytes = ((shared_words + slot_words * tn) * 8) as u64;
        self.m = kc.tile_elems(&self.machine, 2, w, shared_bytes, 2)?;
        let tile_words = 2 * self.m * w;
        let tiles = wram.alloc_words(tn * tile_words)?;
        let unit = b * tn / gcd(b, tn);
        self.samples = (b * SORT_SAMPLES_PER_BUCKET).min(tiles.words()) / unit * unit;
        self.bufs = (0..tn).map(|id| tiles.sub(id * tile_words, tile_words)).collect();
        self.slots = (0..tn).map(|_| wram.alloc_words(slot_words)).collect::<Result<_>>()?;
        *self.counts.borrow_mut() = vec![Vec::new(); tn];
        if self.parallel(tn) {
            if self.samples == 0 && matches!(self.mode, SortMode::Sort { .. }) {
                return Err(SimError::ScratchpadExhausted { requested: b as u64 * 8, available: tiles.bytes });
            }
            // The queue reuses the splitter words once every tasklet holds its
            // own copy, and starts overwrite the running totals in place.
            let splitters = wram.alloc_words(b)?;
            let counts = wram.alloc_words(b + 1)?;
            self.shared = SharedBufs {
                tiles,
                splitters,
                running: counts,
                starts: counts,
                queue: splitters,
                next: wram.alloc_words(1)?,
            };
        }
        Ok(())
    }

    fn tasklet<'a>(&'a self, t: Tasklet<'a>) -> TaskletFuture<'a> {
        Box::pin(self.run(t))
    }

    fn finish(&mut self, wram: &Wram) -> Result<()> {
        if let SortMode::Partition { .. } = self.mode {
            let b = self.buckets;
            self.bucket_bounds = wram.slice(self.shared.starts).iter().take(b + 1).map(|&v| v as usize).collect();
            self.tasklet_counts = self.counts.take();
        }
        Ok(())
    }
}

/// Sorts `arr` in place on one DPU. With `scratch` (an array of the same
/// size) all tasklets cooperate; without it tasklet 0 sorts alone.
pub fn quicksort_mram(
    machine: &MachineConfig,
    dpu: &mut Dpu,
    arr: MramArray,
    scratch: Option<u64>,
    kcfg: &KernelConfig,
) -> Result<KernelMetrics> {
    let k = SortKernel::new(machine, kcfg, arr, SortMode::Sort { scratch });
    Ok(run_on_dpu(machine, dpu, kcfg.tasklets, k)?.1)
}

/// Result of [`partition_parallel`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionOutput {
    /// Record offsets of the buckets in the output, `splitters + 2` entries.
    pub bucket_bounds: Vec<usize>,
    /// `tasklet_counts[t][b]`: records of bucket `b` found in tasklet `t`'s share.
    pub tasklet_counts: Vec<Vec<u64>>,
}

/// Partitions `src` into `dst` by sorted `splitters`: every tasklet splits
/// its contiguous share in place, a prefix sum over the per-tasklet bucket
/// sizes gives output positions, and the pieces are copied there.
pub fn partition_parallel(
    machine: &MachineConfig,
    dpu: &mut Dpu,
    src: MramArray,
    dst: u64,
    splitters: &[i64],
    kcfg: &KernelConfig,
) -> Result<(PartitionOutput, KernelMetrics)> {
    if splitters.windows(2).any(|p| p[0] > p[1]) {
        return Err(SimError::Config("splitters must be sorted".into()));
    }
    let k = SortKernel::new(machine, kcfg, src, SortMode::Partition { dst, splitters: splitters.to_vec() });
    let (k, m) = run_on_dpu(machine, dpu, kcfg.tasklets, k)?;
    Ok((PartitionOutput { bucket_bounds: k.bucket_bounds, tasklet_counts: k.tasklet_counts }, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::record::{host_sort_records, record_multiset};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn words_of(keys: &[i64]) -> Vec<u64> {
        keys.iter().enumerate().flat_map(|(i, &k)| [k as u64, i as u64]).collect()
    }

    fn keys_of(words: &[u64], w: usize) -> Vec<i64> {
        words.chunks_exact(w).map(|c| c[0] as i64).collect()
    }

    #[test]
    fn wram_sort_small() {
        let mut v = words_of(&[3, 1, 2]);
        wram_sort(&mut v, 2);
        assert_eq!(keys_of(&v, 2), vec![1, 2, 3]);
    }

    proptest! {
        #[test]
        fn wram_sort_sorts(keys in proptest::collection::vec(-50i64..50, 0..300)) {
            let mut v = words_of(&keys);
            wram_sort(&mut v, 2);
            prop_assert_eq!(&v, &host_sort_records_stable_keys(&v));
            prop_assert_eq!(record_multiset(&v, 2), record_multiset(&words_of(&keys), 2));
        }

        #[test]
        fn multi_partition_respects_splitters(
            keys in proptest::collection::vec(-100i64..100, 0..200),
            mut sp in proptest::collection::vec(-120i64..120, 1..8),
        ) {
            sp.sort();
            let mut v = words_of(&keys);
            let mut ops = SortOps::default();
            let b = wram_multi_partition(&mut v, 2, &sp, &mut ops);
            for x in 0..=sp.len() {
                for i in b[x]..b[x + 1] {
                    let key = v[2 * i] as i64;
                    if x > 0 { prop_assert!(key >= sp[x - 1]); }
                    if x < sp.len() { prop_assert!(key < sp[x]); }
                }
            }
        }
    }

    /// Helper: the keys must be nondecreasing; returns the input if so.
    fn host_sort_records_stable_keys(v: &[u64]) -> Vec<u64> {
        let k = keys_of(v, 2);
        if k.windows(2).all(|p| p[0] <= p[1]) {
            v.to_vec()
        } else {
            host_sort_records(v, 2)
        }
    }

    fn dpu_with(words: &[u64]) -> Dpu {
        let mut d = Dpu::new(0, 64 << 20, 64 << 10);
        if !words.is_empty() {
            d.mram.write(0, words).unwrap();
        }
        d
    }

    fn check_sort(keys: &[i64], tasklets: usize, scratch: bool) -> KernelMetrics {
        let m = MachineConfig::desk();
        let kc = KernelConfig::default().with_tasklets(tasklets);
        let words = words_of(keys);
        let mut d = dpu_with(&words);
        let arr = MramArray::new(0, keys.len(), 2);
        let scratch_addr = if scratch { Some(32 << 20) } else { None };
        let met = quicksort_mram(&m, &mut d, arr, scratch_addr, &kc).unwrap();
        let out = if keys.is_empty() { vec![] } else { d.mram.read_vec(0, words.len()).unwrap() };
        let got = keys_of(&out, 2);
        let mut want = keys.to_vec();
        want.sort();
        assert_eq!(got, want);
        assert_eq!(record_multiset(&out, 2), record_multiset(&words, 2));
        met
    }

    #[test]
    fn sorts_three_keys() {
        check_sort(&[3, 1, 2], 16, true);
        check_sort(&[], 16, true);
        check_sort(&[5], 4, false);
    }

    #[test]
    fn already_sorted_input_stays_sorted() {
        let keys: Vec<i64> = (0..4096).collect();
        check_sort(&keys, 16, true);
        check_sort(&keys, 1, false);
        let rev: Vec<i64> = (0..4096).rev().collect();
        check_sort(&rev, 16, true);
    }

    #[test]
    fn random_arrays_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..30 {
            let n = rng.gen_range(10..20_000);
            let range = if case % 3 == 0 { 50 } else { 1 << 40 };
            let keys: Vec<i64> = (0..n).map(|_| rng.gen_range(-range..range)).collect();
            let t = [1, 3, 11, 16, 24][case % 5];
            check_sort(&keys, t, case % 2 == 0);
        }
    }

    #[test]
    fn all_equal_keys() {
        check_sort(&vec![9; 5000], 16, true);
        check_sort(&vec![9; 5000], 1, false);
    }

    #[test]
    fn partition_example() {
        let m = MachineConfig::desk();
        let kc = KernelConfig::default().with_tasklets(4);
        let words = words_of(&[9, 1, 7, 2]);
        let mut d = dpu_with(&words);
        let (out, _) = partition_parallel(&m, &mut d, MramArray::new(0, 4, 2), 4096, &[5], &kc).unwrap();
        assert_eq!(out.bucket_bounds, vec![0, 2, 4]);
        let res = keys_of(&d.mram.read_vec(4096, 8).unwrap(), 2);
        let mut lows = res[..2].to_vec();
        lows.sort();
        assert_eq!(lows, vec![1, 2]);
        let mut highs = res[2..].to_vec();
        highs.sort();
        assert_eq!(highs, vec![7, 9]);
    }

    #[test]
    fn partition_all_equal() {
        let m = MachineConfig::desk();
        let kc = KernelConfig::default();
        let words = words_of(&[4; 100]);
        for (p, boundary) in [(4, 0), (5, 100)] {
            let mut d = dpu_with(&words);
            let (out, _) = partition_parallel(&m, &mut d, MramArray::new(0, 100, 2), 1 << 20, &[p], &kc).unwrap();
            assert_eq!(out.bucket_bounds[1], boundary);
            let res = d.mram.read_vec(1 << 20, 200).unwrap();
            assert_eq!(record_multiset(&res, 2), record_multiset(&words, 2));
        }
    }

    #[test]
    fn partition_random_large() {
        let m = MachineConfig::desk();
        let kc = KernelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let keys: Vec<i64> = (0..65536).map(|_| rng.gen_range(0..1_000_000)).collect();
        let words = words_of(&keys);
        let mut d = dpu_with(&words);
        let (out, _) =
            partition_parallel(&m, &mut d, MramArray::new(0, keys.len(), 2), 4 << 20, &[500_000], &kc).unwrap();
        let res = d.mram.read_vec(4 << 20, words.len()).unwrap();
        assert_eq!(record_multiset(&res, 2), record_multiset(&words, 2));
        let bnd = out.bucket_bounds[1];
        assert_eq!(bnd, keys.iter().filter(|&&k| k < 500_000).count());
        for (i, k) in keys_of(&res, 2).into_iter().enumerate() {
            assert_eq!(k < 500_000, i < bnd, "index {i}");
        }
        let per_tasklet: u64 = out.tasklet_counts.iter().map(|c| c[0]).sum();
        assert_eq!(per_tasklet as usize, bnd);
    }

    #[test]
    fn sort_ipc_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let keys: Vec<i64> = (0..20_000).map(|_| rng.gen()).collect();
        for t in [1, 4, 11, 16, 24] {
            let met = check_sort(&keys, t, true);
            assert!(met.ipc <= (t as f64 / 11.0).min(1.0) + 1e-9);
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}
