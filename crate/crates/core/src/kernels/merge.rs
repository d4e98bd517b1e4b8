//! Merging of sorted runs through three scratchpad buffers, and a bottom-up
//! mergesort built on it.
//!
//! Every tasklet owns an equal slice of the output. Its starting positions
//! in the two inputs come from a co-rank binary search over bank memory, so
//! no tasklet ever waits on another.

use super::config::KernelConfig;
use super::cost::{self, COPY_WORD, DMA_SETUP, KEY_CMP, LOOP};
use super::sort::{wram_sort, MramArray};
use crate::error::{Result, SimError};
use crate::machine::{
    run_on_dpu, Dpu, Kernel, KernelMetrics, LaunchInfo, MachineConfig, Tasklet, TaskletFuture, Wram,
    WramRegion,
};

#[derive(Debug, Default, Clone, Copy)]
struct Bufs {
    /// The three tiles as one region, used whole for initial runs.
    all: WramRegion,
    a: WramRegion,
    b: WramRegion,
    out: WramRegion,
    slot: WramRegion,
}

async fn key_at(t: Tasklet<'_>, arr: MramArray, i: usize, slot: WramRegion) -> Result<i64> {
    cost::charge(&t, DMA_SETUP, 1);
    t.mram_read(arr.rec_addr(i), slot.addr(0), 8).await?;
    Ok(t.ld(slot, 0) as i64)
}

/// Records of `a` among the first `k` records of the merge of `a` and `b`
/// (ties taken from `a` first).
async fn co_rank(t: Tasklet<'_>, a: MramArray, b: MramArray, k: usize, slot: WramRegion) -> Result<usize> {
    let mut lo = k.saturating_sub(b.len);
    let mut hi = k.min(a.len);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        let x = key_at(t, a, mid - 1, slot).await?;
        let y = key_at(t, b, k - mid, slot).await?;
        cost::charge(&t, KEY_CMP, 1);
        cost::charge(&t, LOOP, 1);
        if x <= y {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(lo)
}

/// Writes records `k0..k1` of the merge of `a` and `b` to `out` starting at
/// record `at`.
async fn merge_range(
    t: Tasklet<'_>,
    a: MramArray,
    b: MramArray,
    out: MramArray,
    at: usize,
    k0: usize,
    k1: usize,
    bufs: Bufs,
) -> Result<()> {
    if k0 >= k1 {
        return Ok(());
    }
    let w = a.w;
    let m = bufs.out.words() / w;
    let mut i = co_rank(t, a, b, k0, bufs.slot).await?;
    let mut j = k0 - i;
    // Tile windows: [ia, ia + na) of `a` is resident, likewise for `b`.
    let (mut ia, mut na, mut jb, mut nb) = (i, 0usize, j, 0usize);
    let mut k = k0;
    let mut filled = 0usize;
    while k < k1 {
        if i == ia + na && i < a.len {
            ia = i;
            na = (a.len - i).min(m);
            cost::charge(&t, DMA_SETUP, 1);
            t.load(a.rec_addr(ia), bufs.a, 0, na * w).await?;
        }
        if j == jb + nb && j < b.len {
            jb = j;
            nb = (b.len - j).min(m);
            cost::charge(&t, DMA_SETUP, 1);
            t.load(b.rec_addr(jb), bufs.b, 0, nb * w).await?;
        }
        // Merge until the output tile fills or a resident input tile runs out.
        let (moved, compares) = t.wram(|wr| {
            let mut moved = 0usize;
            let mut compares = 0u64;
            while k + moved < k1 && filled + moved < m {
                // Both tiles are resident unless their run is exhausted.
                let take_a = if i >= a.len {
                    false
                } else if j >= b.len {
                    true
                } else {
                    compares += 1;
                    wr.get(bufs.a, (i - ia) * w) as i64 <= wr.get(bufs.b, (j - jb) * w) as i64
                };
                let (src, off) = if take_a { (bufs.a, (i - ia) * w) } else { (bufs.b, (j - jb) * w) };
                let dst = (filled + moved) * w;
                for x in 0..w {
                    let v = wr.get(src, off + x);
                    wr.set(bufs.out, dst + x, v);
                }
                if take_a {
                    i += 1;
                } else {
                    j += 1;
                }
                moved += 1;
                // A drained input tile with more data behind it needs a refill.
                if (i == ia + na && i < a.len) || (j == jb + nb && j < b.len) {
                    break;
                }
            }
            (moved, compares)
        });
        cost::charge(&t, KEY_CMP, compares);
        cost::charge(&t, COPY_WORD, (moved * w) as u64);
        cost::charge(&t, LOOP, moved as u64);
        k += moved;
        filled += moved;
        if filled == m || (k == k1 && filled > 0) {
            cost::charge(&t, DMA_SETUP, 1);
            t.store(bufs.out, 0, filled * w, out.rec_addr(at + k - k0 - filled)).await?;
            filled = 0;
        }
    }
    Ok(())
}

/// What one [`MergeKernel`] launch does.
#[derive(Debug, Clone)]
enum MergeJob {
    /// Merge two runs into `out`.
    Pass { a: MramArray, b: MramArray, out: MramArray },
    /// Bottom-up mergesort of `arr` using `scratch` as the ping-pong half.
    Sort { arr: MramArray, scratch: u64 },
}

#[derive(Debug, Clone)]
pub struct MergeKernel {
    job: MergeJob,
    machine: MachineConfig,
    kcfg: KernelConfig,
    bufs: Vec<Bufs>,
    m: usize,
    /// Set by `finish` for sorts: whether the result ended in `scratch`.
    pub in_scratch: bool,
}

impl MergeKernel {
    fn new(machine: &MachineConfig, kcfg: &KernelConfig, job: MergeJob) -> Self {
        MergeKernel { job, machine: machine.clone(), kcfg: kcfg.clone(), bufs: Vec::new(), m: 0, in_scratch: false }
    }

    fn w(&self) -> usize {
        match &self.job {
            MergeJob::Pass { a, .. } => a.w,
            MergeJob::Sort { arr, .. } => arr.w,
        }
    }

    /// Output records `[lo, hi)` of tasklet `id` out of `tn` over `n`.
    fn share(n: usize, id: usize, tn: usize) -> (usize, usize) {
        (n * id / tn, n * (id + 1) / tn)
    }

    async fn run(&self, t: Tasklet<'_>) -> Result<()> {
        let (id, tn) = (t.id(), t.count());
        let bufs = self.bufs[id];
        match &self.job {
            MergeJob::Pass { a, b, out } => {
                let (k0, k1) = Self::share(a.len + b.len, id, tn);
                merge_range(t, *a, *b, *out, k0, k0, k1, bufs).await
            }
            MergeJob::Sort { arr, scratch } => {
                let n = arr.len;
                let w = arr.w;
                // Initial runs: tiles of three buffers sorted in the scratchpad.
                let run0 = 3 * self.m;
                let leaf = bufs.all;
                let mut r = id;
                while r * run0 < n {
                    let lo = r * run0;
                    let len = (n - lo).min(run0);
                    cost::charge(&t, DMA_SETUP, 2);
                    t.load(arr.rec_addr(lo), leaf, 0, len * w).await?;
                    let ops = t.wram(|wr| wram_sort(&mut wr.slice_mut(leaf)[..len * w], w));
                    ops.charge(&t, w);
                    t.store(leaf, 0, len * w, arr.rec_addr(lo)).await?;
                    r += tn;
                }
                let (mut src, mut dst) = (*arr, MramArray { addr: *scratch, ..*arr });
                let mut run = run0;
                while run < n {
                    t.barrier().await?;
                    let (k0, k1) = Self::share(n, id, tn);
                    // Every pair of runs overlapping this tasklet's output slice.
                    let mut p = k0 / (2 * run) * (2 * run);
                    while p < k1 {
                        let la = run.min(n - p);
                        let lb = (2 * run).min(n - p) - la;
                        let a = MramArray { addr: src.rec_addr(p), len: la, w };
                        let b = MramArray { addr: src.rec_addr(p + la), len: lb, w };
                        let out = MramArray { addr: dst.rec_addr(p), len: la + lb, w };
                        let lo = k0.max(p) - p;
                        let hi = k1.min(p + la + lb) - p;
                        cost::charge(&t, LOOP, 1);
                        merge_range(t, a, b, out, lo, lo, hi, bufs).await?;
                        p += 2 * run;
                    }
                    std::mem::swap(&mut src, &mut dst);
                    run *= 2;
                }
                Ok(())
            }
        }
    }
}

impl Kernel for MergeKernel {
    fn name(&self) -> &'static str {
        match self.job {
            MergeJob::Pass { .. } => "merge",
            MergeJob::Sort { .. } => "mergesort",
        }
    }

    fn setup(&mut self, wram: &mut Wram, info: LaunchInfo) -> Result<()> {
        let tn = info.tasklets;
        let w = self.w();
        let kc = self.kcfg.with_tasklets(tn);
        self.m = kc.tile_elems(&self.machine, 3, w, (tn * 8) as u64, 1)?;
        let tile = self.m * w;
        self.bufs = (0..tn)
            .map(|_| {
                let all = wram.alloc_words(3 * tile)?;
                Ok(Bufs {
                    all,
                    a: all.sub(0, tile),
                    b: all.sub(tile, tile),
                    out: all.sub(2 * tile, tile),
                    slot: wram.alloc_words(1)?,
                })
            })
            .collect::<Result<_>>()?;
        if let MergeJob::Sort { arr, .. } = &self.job {
            let mut run = 3 * self.m;
            let mut passes = 0;
            while run < arr.len {
                run *= 2;
                passes += 1;
            }
            self.in_scratch = passes % 2 == 1;
        }
        Ok(())
    }

    fn tasklet<'a>(&'a self, t: Tasklet<'a>) -> TaskletFuture<'a> {
        Box::pin(self.run(t))
    }
}

/// Merges sorted runs `a` and `b` into `out` (disjoint, `a.len + b.len`
/// records).
pub fn merge_pass(
    machine: &MachineConfig,
    dpu: &mut Dpu,
    a: MramArray,
    b: MramArray,
    out: u64,
    kcfg: &KernelConfig,
) -> Result<KernelMetrics> {
    if a.w != b.w {
        return Err(SimError::Config("merged runs must have equal record width".into()));
    }
    let out = MramArray { addr: out, len: a.len + b.len, w: a.w };
    let k = MergeKernel::new(machine, kcfg, MergeJob::Pass { a, b, out });
    Ok(run_on_dpu(machine, dpu, kcfg.tasklets, k)?.1)
}

/// Sorts `arr` with scratchpad-sorted initial runs followed by merge passes
/// that alternate between `arr` and `scratch`. Returns whether the sorted
/// data ended up in `scratch`.
pub fn mergesort_mram(
    machine: &MachineConfig,
    dpu: &mut Dpu,
    arr: MramArray,
    scratch: u64,
    kcfg: &KernelConfig,
) -> Result<(bool, KernelMetrics)> {
    let k = MergeKernel::new(machine, kcfg, MergeJob::Sort { arr, scratch });
    let (k, m) = run_on_dpu(machine, dpu, kcfg.tasklets, k)?;
    Ok((k.in_scratch, m))
}
