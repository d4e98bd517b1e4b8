//! Hash partitioning: bucket counting with per-tasklet counters, scatter
//! through a lock-protected bucket cache in the scratchpad, and multi-pass
//! radix clustering on the top bits of the hash.

use std::cell::RefCell;

use super::config::KernelConfig;
use super::cost::{self, Mix, COPY_WORD, COUNTER_INC, DMA_SETUP, KEY_CMP, LOOP};
use super::hash::{hash32, HashBits, BUCKET_EXTRACT, HASH32_COST};
use super::prefix::charge_prefix;
use super::sort::MramArray;
use crate::error::{Result, SimError};
use crate::machine::{
    run_on_dpu, Dpu, InstrClass, Kernel, KernelMetrics, LaunchInfo, MachineConfig, Tasklet, TaskletFuture,
    Wram, WramRegion,
};

const KEY_LOAD: Mix = &[(InstrClass::WramLoad8, 1)];

/// Largest input tile per tasklet; the rest of the scratchpad goes to the
/// bucket cache.
const MAX_INPUT_TILE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Count,
    Scatter,
    Both,
}

#[derive(Debug, Default, Clone, Copy)]
struct Regions {
    sizes: WramRegion,
    cursor: WramRegion,
    ends: WramRegion,
    fill: WramRegion,
    /// Per-tasklet counters while counting, bucket cache while scattering.
    cache: WramRegion,
}

#[derive(Debug)]
pub struct HashPartitionKernel {
    src: MramArray,
    dst: u64,
    /// Record boundaries of the groups partitioned independently.
    groups: Vec<usize>,
    bits: HashBits,
    phase: Phase,
    offsets: Vec<u64>,
    machine: MachineConfig,
    kcfg: KernelConfig,
    m: usize,
    /// Records the cache holds per bucket.
    cap: usize,
    /// Counters are shared and locked per bucket because one set per
    /// tasklet does not fit.
    shared_counts: bool,
    tiles: Vec<WramRegion>,
    r: Regions,
    /// Bucket boundaries of every group, as tasklet 0 computes them.
    bounds: RefCell<Vec<Vec<u64>>>,
    pub sizes: Vec<u64>,
}

impl HashPartitionKernel {
    fn new(
        machine: &MachineConfig,
        kcfg: &KernelConfig,
        src: MramArray,
        dst: u64,
        groups: Vec<usize>,
        bits: HashBits,
        phase: Phase,
        offsets: Vec<u64>,
    ) -> Self {
        HashPartitionKernel {
            src,
            dst,
            groups,
            bits,
            phase,
            offsets,
            machine: machine.clone(),
            kcfg: kcfg.clone(),
            m: 0,
            cap: 0,
            shared_counts: false,
            tiles: Vec::new(),
            r: Regions::default(),
            bounds: RefCell::new(Vec::new()),
            sizes: Vec::new(),
        }
    }

    fn bucket_of(&self, t: &Tasklet<'_>, key: i64) -> usize {
        cost::charge(t, KEY_LOAD, 1);
        cost::charge(t, HASH32_COST, 1);
        cost::charge(t, BUCKET_EXTRACT, 1);
        self.bits.bucket_of_hash(hash32(key))
    }

    async fn count(&self, t: Tasklet<'_>, gs: usize, ge: usize) -> Result<()> {
        let (id, tn) = (t.id(), t.count());
        let b = self.bits.buckets();
        let w = self.src.w;
        let mine = if self.shared_counts { self.r.cache.sub(0, b) } else { self.r.cache.sub(id * b, b) };
        if !self.shared_counts || id == 0 {
            for x in 0..b {
                t.st(mine, x, 0);
            }
            cost::charge(&t, COUNTER_INC, b as u64);
        }
        if self.shared_counts {
            t.barrier().await?;
        }
        let tile = self.tiles[id];
        let mut at = gs + id * self.m;
        while at < ge {
            let n = (ge - at).min(self.m);
            cost::charge(&t, DMA_SETUP, 1);
            t.load(self.src.rec_addr(at), tile, 0, n * w).await?;
            for i in 0..n {
                let x = self.bucket_of(&t, t.ld(tile, i * w) as i64);
                if self.shared_counts {
                    t.lock(1 + x).await?;
                    t.st(mine, x, t.ld(mine, x) + 1);
                    t.unlock(1 + x).await?;
                } else {
                    t.st(mine, x, t.ld(mine, x) + 1);
                }
            }
            cost::charge(&t, COUNTER_INC, n as u64);
            cost::charge(&t, LOOP, n as u64 + 1);
            at += tn * self.m;
        }
        t.barrier().await?;
        // Each tasklet sums a stripe of bucket columns across all counters.
        let sets = if self.shared_counts { 1 } else { tn };
        let mut x = id;
        while x < b {
            let total: u64 = (0..sets).map(|u| t.ld(self.r.cache, u * b + x)).sum();
            t.st(self.r.sizes, x, total);
            cost::charge(&t, COUNTER_INC, sets as u64);
            x += tn;
        }
        t.barrier().await?;
        if id == 0 {
            let mut acc = gs as u64;
            let mut bounds = Vec::with_capacity(b + 1);
            for x in 0..b {
                bounds.push(acc);
                t.st(self.r.cursor, x, acc);
                acc += t.ld(self.r.sizes, x);
                t.st(self.r.ends, x, acc);
                t.st(self.r.fill, x, 0);
            }
            bounds.push(acc);
            charge_prefix(&t, b);
            cost::charge(&t, COPY_WORD, 2 * b as u64);
            self.bounds.borrow_mut().push(bounds);
        }
        t.barrier().await
    }

    /// Writes the `n` cached records of bucket `x` to its next output slots.
    async fn flush(&self, t: Tasklet<'_>, x: usize, n: usize) -> Result<()> {
        let w = self.src.w;
        let cur = t.ld(self.r.cursor, x);
        cost::charge(&t, KEY_CMP, 1);
        if cur + n as u64 > t.ld(self.r.ends, x) {
            return Err(SimError::BucketOverflow { bucket: x });
        }
        let slot = self.r.cache.sub(x * self.cap * w, self.cap * w);
        cost::charge(&t, DMA_SETUP, 1);
        t.store(slot, 0, n * w, self.dst + cur * (w as u64) * 8).await?;
        t.st(self.r.cursor, x, cur + n as u64);
        cost::charge(&t, COUNTER_INC, 1);
        Ok(())
    }

    async fn scatter(&self, t: Tasklet<'_>, gs: usize, ge: usize) -> Result<()> {
        let (id, tn) = (t.id(), t.count());
        let w = self.src.w;
        let cap = self.cap;
        let tile = self.tiles[id];
        let mut at = gs + id * self.m;
        while at < ge {
            let n = (ge - at).min(self.m);
            cost::charge(&t, DMA_SETUP, 1);
            t.load(self.src.rec_addr(at), tile, 0, n * w).await?;
            for i in 0..n {
                let x = self.bucket_of(&t, t.ld(tile, i * w) as i64);
                // Mutex 0 is left free for kernels that embed this one.
                t.lock(1 + x).await?;
                let f = t.ld(self.r.fill, x) as usize;
                t.wram(|wr| {
                    for k in 0..w {
                        let v = wr.get(tile, i * w + k);
                        wr.set(self.r.cache, (x * cap + f) * w + k, v);
                    }
                });
                cost::charge(&t, COPY_WORD, w as u64);
                cost::charge(&t, COUNTER_INC, 1);
                cost::charge(&t, KEY_CMP, 1);
                if f + 1 == cap {
                    self.flush(t, x, cap).await?;
                    t.st(self.r.fill, x, 0);
                } else {
                    t.st(self.r.fill, x, f as u64 + 1);
                }
                t.unlock(1 + x).await?;
            }
            cost::charge(&t, LOOP, n as u64 + 1);
            at += tn * self.m;
        }
        t.barrier().await?;
        // Partially filled buckets, striped over the tasklets.
        let b = self.bits.buckets();
        let mut x = id;
        while x < b {
            let f = t.ld(self.r.fill, x) as usize;
            if f > 0 {
                self.flush(t, x, f).await?;
                t.st(self.r.fill, x, 0);
            }
            cost::charge(&t, LOOP, 1);
            x += tn;
        }
        t.barrier().await
    }

    async fn run(&self, t: Tasklet<'_>) -> Result<()> {
        for g in 0..self.groups.len() - 1 {
            let (gs, ge) = (self.groups[g], self.groups[g + 1]);
            if gs == ge && self.phase == Phase::Both {
                if t.id() == 0 {
                    self.bounds.borrow_mut().push(vec![gs as u64; self.bits.buckets() + 1]);
                }
                continue;
            }
            if self.phase != Phase::Scatter {
                self.count(t, gs, ge).await?;
            }
            if self.phase != Phase::Count {
                self.scatter(t, gs, ge).await?;
            }
        }
        Ok(())
    }
}

impl Kernel for HashPartitionKernel {
    fn name(&self) -> &'static str {
        match self.phase {
            Phase::Count => "hash_partition_count",
            Phase::Scatter => "hash_partition_scatter",
            Phase::Both => "radix_partition_pass",
        }
    }

    fn setup(&mut self, wram: &mut Wram, info: LaunchInfo) -> Result<()> {
        let tn = info.tasklets;
        let b = self.bits.buckets();
        let w = self.src.w;
        let budget = self.machine.wram_budget(tn);
        let small = ((4 * b) * 8) as u64;
        let rest = budget.saturating_sub(small);
        let tile_bytes_each = rest / 2 / (tn * w * 8) as u64;
        self.m = (tile_bytes_each as usize).min(self.kcfg.buffer_elems).min(MAX_INPUT_TILE);
        let cache_bytes = rest.saturating_sub((tn * self.m * w * 8) as u64);
        self.cap = (cache_bytes / (b * w * 8) as u64) as usize;
        self.shared_counts = ((tn * b * 8) as u64) > cache_bytes;
        let counters = if self.shared_counts { b } else { tn * b };
        let cache_words = (b * self.cap * w).max(counters);
        if self.m == 0 || self.cap == 0 || (cache_words * 8) as u64 > cache_bytes {
            return Err(SimError::ScratchpadExhausted {
                requested: small + ((tn * w + b * w + b) * 8) as u64,
                available: budget,
            });
        }
        self.tiles = (0..tn).map(|_| wram.alloc_words(self.m * w)).collect::<Result<_>>()?;
        self.r = Regions {
            sizes: wram.alloc_words(b)?,
            cursor: wram.alloc_words(b)?,
            ends: wram.alloc_words(b)?,
            fill: wram.alloc_words(b)?,
            cache: wram.alloc_words(cache_words)?,
        };
        if self.phase == Phase::Scatter {
            // Offsets arrive from the host before launch.
            for x in 0..b {
                wram.set(self.r.cursor, x, self.offsets[x]);
                wram.set(self.r.ends, x, self.offsets[x + 1]);
                wram.set(self.r.fill, x, 0);
            }
        }
        Ok(())
    }

    fn tasklet<'a>(&'a self, t: Tasklet<'a>) -> TaskletFuture<'a> {
        Box::pin(self.run(t))
    }

    fn finish(&mut self, wram: &Wram) -> Result<()> {
        if self.phase != Phase::Scatter {
            self.sizes = wram.slice(self.r.sizes).to_vec();
        }
        Ok(())
    }
}

/// Bucket sizes and their exclusive prefix sum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketCounts {
    pub sizes: Vec<u64>,
    /// `sizes.len() + 1` entries; the last is the record count.
    pub offsets: Vec<u64>,
}

/// Counts the records of `region` falling into each bucket of `bits`.
pub fn hash_partition_count(
    machine: &MachineConfig,
    dpu: &mut Dpu,
    region: MramArray,
    bits: HashBits,
    kcfg: &KernelConfig,
) -> Result<(BucketCounts, KernelMetrics)> {
    let k = HashPartitionKernel::new(machine, kcfg, region, 0, vec![0, region.len], bits, Phase::Count, Vec::new());
    let (k, m) = run_on_dpu(machine, dpu, kcfg.tasklets, k)?;
    let offsets = k.bounds.into_inner().pop().unwrap_or_else(|| vec![0; bits.buckets() + 1]);
    let sizes = if region.len == 0 { vec![0; bits.buckets()] } else { k.sizes };
    Ok((BucketCounts { sizes, offsets }, m))
}

/// Writes every record of `region` into `out` at the range of its bucket
/// given by `offsets` (from [`hash_partition_count`]). Order within a
/// bucket follows the cache flush order.
pub fn hash_partition_scatter(
    machine: &MachineConfig,
    dpu: &mut Dpu,
    region: MramArray,
    offsets: &[u64],
    bits: HashBits,
    out: u64,
    kcfg: &KernelConfig,
) -> Result<KernelMetrics> {
    if offsets.len() != bits.buckets() + 1 {
        return Err(SimError::Config(format!(
            "{} offsets for {} buckets",
            offsets.len(),
            bits.buckets()
        )));
    }
    let k = HashPartitionKernel::new(
        machine,
        kcfg,
        region,
        out,
        vec![0, region.len],
        bits,
        Phase::Scatter,
        offsets.to_vec(),
    );
    Ok(run_on_dpu(machine, dpu, kcfg.tasklets, k)?.1)
}

/// Result of [`multipass_radix_partition`].
#[derive(Debug, Clone)]
pub struct RadixOutput {
    /// Whether the final grouping lives in the scratch array.
    pub in_scratch: bool,
    /// Record boundaries of the `2^total_bits` final groups.
    pub bounds: Vec<usize>,
    pub passes: usize,
    pub metrics: Vec<KernelMetrics>,
}

/// Groups `region` by the top `total_bits` bits of the key hash, taking
/// `bits_per_pass` bits per pass (the last pass takes what remains) and
/// alternating between `region` and `scratch`.
pub fn multipass_radix_partition(
    machine: &MachineConfig,
    dpu: &mut Dpu,
    region: MramArray,
    scratch: u64,
    total_bits: u32,
    bits_per_pass: u32,
    kcfg: &KernelConfig,
) -> Result<RadixOutput> {
    radix_partition_below(machine, dpu, region, scratch, 0, total_bits, bits_per_pass, kcfg)
}

/// As [`multipass_radix_partition`], using the `total_bits` hash bits
/// below the top `skip` bits.
#[allow(clippy::too_many_arguments)]
pub fn radix_partition_below(
    machine: &MachineConfig,
    dpu: &mut Dpu,
    region: MramArray,
    scratch: u64,
    skip: u32,
    total_bits: u32,
    bits_per_pass: u32,
    kcfg: &KernelConfig,
) -> Result<RadixOutput> {
    if total_bits == 0 || total_bits > 24 || bits_per_pass == 0 || bits_per_pass > total_bits || skip + total_bits > 32
    {
        return Err(SimError::Config(format!(
            "radix partition needs 0 < bits_per_pass ({bits_per_pass}) ≤ total_bits ({total_bits}) ≤ 24 \
             and {skip} skipped bits + total ≤ 32"
        )));
    }
    let passes = total_bits.div_ceil(bits_per_pass) as usize;
    let mut groups = vec![0, region.len];
    let (mut src, mut dst) = (region, MramArray { addr: scratch, ..region });
    let mut metrics = Vec::with_capacity(passes);
    for p in 0..passes {
        let done = p as u32 * bits_per_pass;
        let bits = HashBits::top(skip + done, bits_per_pass.min(total_bits - done));
        let k = HashPartitionKernel::new(machine, kcfg, src, dst.addr, groups.clone(), bits, Phase::Both, Vec::new());
        let (k, m) = run_on_dpu(machine, dpu, kcfg.tasklets, k)?;
        metrics.push(m);
        let per_group = k.bounds.into_inner();
        let mut next = Vec::with_capacity(per_group.len() * bits.buckets() + 1);
        for g in &per_group {
            next.extend(g[..g.len() - 1].iter().map(|&v| v as usize));
        }
        next.push(region.len);
        groups = next;
        std::mem::swap(&mut src, &mut dst);
    }
    Ok(RadixOutput { in_scratch: passes % 2 == 1, bounds: groups, passes, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::record::record_multiset;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (MachineConfig, Dpu) {
        let m = MachineConfig::desk();
        let d = Dpu::new(0, m.mram_bytes, m.wram_bytes);
        (m, d)
    }

    fn load(d: &mut Dpu, keys: &[i64]) -> Vec<u64> {
        let words: Vec<u64> = keys.iter().enumerate().flat_map(|(i, &k)| [k as u64, i as u64]).collect();
        if !words.is_empty() {
            d.mram.write(0, &words).unwrap();
        }
        words
    }

    fn histogram(keys: &[i64], bits: HashBits) -> Vec<u64> {
        let mut h = vec![0; bits.buckets()];
        for &k in keys {
            h[bits.bucket(k)] += 1;
        }
        h
    }

    #[test]
    fn count_matches_host_histogram() {
        let (m, mut d) = setup();
        let keys = [1, 2, 3, 4];
        load(&mut d, &keys);
        let bits = HashBits::low(1);
        let kc = KernelConfig::default().with_tasklets(4);
        let (c, met) = hash_partition_count(&m, &mut d, MramArray::new(0, 4, 2), bits, &kc).unwrap();
        assert_eq!(c.sizes, histogram(&keys, bits));
        assert_eq!(c.offsets, vec![0, c.sizes[0], 4]);
        assert_eq!(met.class(InstrClass::Mul32) + met.class(InstrClass::Div32), 0);
    }

    #[test]
    fn many_buckets_share_counters() {
        let (m, mut d) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let keys: Vec<i64> = (0..5000).map(|_| rng.gen_range(0..1 << 30)).collect();
        load(&mut d, &keys);
        let bits = HashBits::top(0, 8);
        let kc = KernelConfig::default().with_tasklets(24);
        let (c, met) = hash_partition_count(&m, &mut d, MramArray::new(0, keys.len(), 2), bits, &kc).unwrap();
        assert_eq!(c.sizes, histogram(&keys, bits));
        assert!(met.class(InstrClass::Sync) > 0);
    }

    #[test]
    fn count_empty_region() {
        let (m, mut d) = setup();
        let kc = KernelConfig::default();
        let (c, _) = hash_partition_count(&m, &mut d, MramArray::new(0, 0, 2), HashBits::low(5), &kc).unwrap();
        assert_eq!(c.sizes, vec![0; 32]);
        assert_eq!(c.offsets, vec![0; 33]);
    }

    #[test]
    fn count_and_scatter_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let keys: Vec<i64> = (0..100_000).map(|_| rng.gen()).collect();
        for (tasklets, bits) in [(16, 5u32), (24, 5), (1, 3), (11, 0)] {
            let (m, mut d) = setup();
            let words = load(&mut d, &keys);
            let region = MramArray::new(0, keys.len(), 2);
            let hb = HashBits::low(bits);
            let kc = KernelConfig::default().with_tasklets(tasklets);
            let (c, _) = hash_partition_count(&m, &mut d, region, hb, &kc).unwrap();
            assert_eq!(c.sizes.iter().sum::<u64>(), keys.len() as u64);
            assert_eq!(c.sizes, histogram(&keys, hb));
            let out = 16 << 20;
            let met = hash_partition_scatter(&m, &mut d, region, &c.offsets, hb, out, &kc).unwrap();
            assert_eq!(met.class(InstrClass::Mul32), 0);
            let got = d.mram.read_vec(out, words.len()).unwrap();
            assert_eq!(record_multiset(&got, 2), record_multiset(&words, 2));
            for x in 0..hb.buckets() {
                let (lo, hi) = (c.offsets[x] as usize, c.offsets[x + 1] as usize);
                for r in got[lo * 2..hi * 2].chunks(2) {
                    assert_eq!(hb.bucket(r[0] as i64), x);
                }
            }
        }
    }

    #[test]
    fn parity_scatter_groups_buckets() {
        let (m, mut d) = setup();
        let keys: Vec<i64> = (0..40).collect();
        let words = load(&mut d, &keys);
        let hb = HashBits::low(1);
        let kc = KernelConfig::default().with_tasklets(3);
        let region = MramArray::new(0, 40, 2);
        let (c, _) = hash_partition_count(&m, &mut d, region, hb, &kc).unwrap();
        hash_partition_scatter(&m, &mut d, region, &c.offsets, hb, 1 << 20, &kc).unwrap();
        let got = d.mram.read_vec(1 << 20, 80).unwrap();
        let split = c.offsets[1] as usize * 2;
        let want_low: Vec<u64> = words.chunks(2).filter(|r| hb.bucket(r[0] as i64) == 0).flatten().copied().collect();
        assert_eq!(record_multiset(&got[..split], 2), record_multiset(&want_low, 2));
    }

    #[test]
    fn inconsistent_offsets_overflow() {
        let (m, mut d) = setup();
        let keys: Vec<i64> = (0..100).collect();
        load(&mut d, &keys);
        let kc = KernelConfig::default().with_tasklets(2);
        let hb = HashBits::low(1);
        let err = hash_partition_scatter(&m, &mut d, MramArray::new(0, 100, 2), &[0, 10, 100], hb, 1 << 20, &kc);
        assert!(matches!(err, Err(SimError::BucketOverflow { .. })), "{err:?}");
    }

    #[test]
    fn multipass_matches_single_pass_grouping() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let keys: Vec<i64> = (0..50_000).map(|_| rng.gen()).collect();
        let top = HashBits::top(0, 10);
        let hist = histogram(&keys, top);
        for bpp in [5u32, 3, 4] {
            let (m, mut d) = setup();
            let words = load(&mut d, &keys);
            let kc = KernelConfig::default();
            let out = multipass_radix_partition(&m, &mut d, MramArray::new(0, keys.len(), 2), 16 << 20, 10, bpp, &kc)
                .unwrap();
            assert_eq!(out.passes, 10usize.div_ceil(bpp as usize));
            assert_eq!(out.bounds.len(), 1025);
            let at = if out.in_scratch { 16 << 20 } else { 0 };
            let got = d.mram.read_vec(at, words.len()).unwrap();
            assert_eq!(record_multiset(&got, 2), record_multiset(&words, 2));
            for g in 0..1024 {
                let (lo, hi) = (out.bounds[g], out.bounds[g + 1]);
                assert_eq!((hi - lo) as u64, hist[g]);
                for r in got[lo * 2..hi * 2].chunks(2) {
                    assert_eq!(top.bucket(r[0] as i64), g);
                }
            }
        }
    }

    #[test]
    fn single_wide_pass_exceeds_scratchpad() {
        let (m, mut d) = setup();
        load(&mut d, &[1, 2, 3]);
        let kc = KernelConfig::default();
        let r = multipass_radix_partition(&m, &mut d, MramArray::new(0, 3, 2), 1 << 20, 10, 10, &kc);
        assert!(matches!(r, Err(SimError::ScratchpadExhausted { .. })));
    }
}
