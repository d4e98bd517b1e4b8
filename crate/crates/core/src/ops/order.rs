//! Ordering by word 0.
//!
//! Global order samples keys on every DPU, picks `dpus - 1` splitters on
//! the host, partitions each DPU's records into key ranges, sends range
//! `d` to DPU `d` and sorts locally, so that reading the DPUs in order
//! gives a sorted relation. Top-k sorts each DPU locally and merges only
//! the heads on the host.

use super::table::DistTable;
use crate::error::{Result, SimError};
use crate::host::{Direction, Fragment, Route, Session, TransferDescriptor};
use crate::kernels::sort::{SortKernel, SortMode};
use crate::machine::run_on_dpu;

/// Splitter candidates read per DPU on the first attempt.
pub const SAMPLES_PER_DPU: usize = 32;

/// Reads up to `per` evenly spaced keys from every DPU of every table.
pub(crate) fn sample_keys(s: &mut Session, tables: &[&DistTable], per: usize) -> Result<Vec<i64>> {
    let mut frags = Vec::new();
    for t in tables {
        for d in 0..s.dpu_count() {
            let n = t.rows[d];
            let k = per.min(n);
            for j in 0..k {
                let i = (2 * j + 1) * n / (2 * k);
                frags.push(Fragment { dpu: d, mram_addr: t.array(d).rec_addr(i), host_offset: frags.len(), words: 1 });
            }
        }
    }
    if frags.is_empty() {
        return Ok(Vec::new());
    }
    let mut host = vec![0u64; frags.len()];
    s.p2h(&TransferDescriptor::scatter_gather(Direction::FromDpu, frags), &mut host, &[])?;
    s.host_sync();
    let mut keys: Vec<i64> = host.into_iter().map(|v| v as i64).collect();
    keys.sort_unstable();
    Ok(keys)
}

/// `parts - 1` splitters taken evenly from sorted samples.
pub(crate) fn pick_splitters(samples: &[i64], parts: usize) -> Vec<i64> {
    if samples.is_empty() {
        return vec![i64::MAX; parts - 1];
    }
    (1..parts).map(|i| samples[i * samples.len() / parts]).collect()
}

/// Moves key range `d` of `t` (as cut by `splitters`) to DPU `d`. Fails
/// with `SkewOverflow` when a DPU would receive more than `limit` records.
/// Returns the redistributed table, unsorted within each DPU.
pub(crate) fn range_redistribute(
    s: &mut Session,
    t: &DistTable,
    splitters: &[i64],
    limit: usize,
) -> Result<DistTable> {
    let dpus = s.dpu_count();
    let w = t.w();
    let parted = s.alloc(t.cap * w)?;
    let (m, k) = (s.machine.clone(), s.opts.kernel.clone());
    let tn = s.tasklets();
    let bounds = s.per_dpu(|d, dpu| {
        let kern =
            SortKernel::new(&m, &k, t.array(d), SortMode::Partition { dst: parted, splitters: splitters.to_vec() });
        let (kern, met) = run_on_dpu(&m, dpu, tn, kern)?;
        Ok((kern.bucket_bounds, vec![met]))
    })?;
    let mut recv = vec![0usize; dpus];
    for b in &bounds {
        for (d, r) in recv.iter_mut().enumerate() {
            *r += b[d + 1] - b[d];
        }
    }
    let need = recv.iter().copied().max().unwrap_or(0);
    if need > limit {
        return Err(SimError::SkewOverflow(format!("a DPU would receive {need} records, limit {limit}")));
    }
    let dest = s.alloc(need * w)?;
    let mut routes = Vec::new();
    for (src, b) in bounds.iter().enumerate() {
        for dst in 0..dpus {
            routes.push(Route {
                src,
                mram_addr: parted + (b[dst] * w * 8) as u64,
                words: (b[dst + 1] - b[dst]) * w,
                dst,
            });
        }
    }
    let mode = s.opts.transfer;
    s.redistribute(&routes, dest, need * w, mode)?;
    Ok(DistTable { cols: t.cols.clone(), addr: dest, cap: need, rows: recv })
}

/// Sorts every DPU's records in place using a scratch array.
pub(crate) fn local_sort(s: &mut Session, t: &DistTable) -> Result<()> {
    let scratch = s.alloc(t.cap * t.w())?;
    let (m, k) = (s.machine.clone(), s.opts.kernel.clone());
    let tn = s.tasklets();
    s.per_dpu(|d, dpu| {
        let kern = SortKernel::new(&m, &k, t.array(d), SortMode::Sort { scratch: Some(scratch) });
        Ok(((), vec![run_on_dpu(&m, dpu, tn, kern)?.1]))
    })?;
    Ok(())
}

/// Largest per-DPU record count a range redistribution may produce: the
/// destination and the sort scratch must both fit the free bank memory.
fn range_limit(s: &Session, t: &DistTable) -> usize {
    s.mram_free_words() / (3 * t.w()).max(1)
}

/// Range partitioning with resampling: on overflow the sample grows
/// fourfold until it covers every record. Returns the tables and the
/// splitters that cut them.
pub(crate) fn range_partition_tables(
    s: &mut Session,
    tables: &[&DistTable],
) -> Result<(Vec<DistTable>, Vec<i64>)> {
    let max_rows = tables.iter().map(|t| t.max_rows()).max().unwrap_or(0);
    let mut per = SAMPLES_PER_DPU;
    loop {
        let samples = sample_keys(s, tables, per)?;
        let splitters = pick_splitters(&samples, s.dpu_count());
        let mark = s.heap_mark();
        let mut out = Vec::with_capacity(tables.len());
        let mut overflow = None;
        for t in tables {
            let limit = range_limit(s, t);
            match range_redistribute(s, t, &splitters, limit) {
                Ok(r) => out.push(r),
                Err(e @ SimError::SkewOverflow(_)) => {
                    overflow = Some(e);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        match overflow {
            None => return Ok((out, splitters)),
            Some(e) if per >= max_rows => return Err(e),
            Some(_) => {
                s.heap_release(mark);
                per *= 4;
            }
        }
    }
}

/// Globally sorts `t` by word 0 across DPUs.
pub fn order_global(s: &mut Session, t: &DistTable) -> Result<DistTable> {
    s.ops.order += 1;
    if s.dpu_count() == 1 {
        local_sort(s, t)?;
        return Ok(t.clone());
    }
    let r = range_partition_tables(s, &[t])?.0.pop().expect("one table in, one out");
    local_sort(s, &r)?;
    Ok(r)
}

/// The `k` records with the smallest keys, in order. Each DPU sorts its
/// records in place; the host reads the first `k` of every DPU and merges.
pub fn order_topk(s: &mut Session, t: &DistTable, k: usize) -> Result<Vec<Vec<i64>>> {
    s.ops.order += 1;
    local_sort(s, t)?;
    let lens: Vec<usize> = t.rows.iter().map(|&r| r.min(k) * t.w()).collect();
    let heads = s.read_per_dpu(t.addr, &lens)?;
    s.host_sync();
    let mut all: Vec<Vec<i64>> =
        heads.iter().flat_map(|h| h.chunks_exact(t.w()).map(|r| r.iter().map(|&v| v as i64).collect())).collect();
    all.sort();
    all.truncate(k);
    Ok(all)
}
