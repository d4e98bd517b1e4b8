//! Microbenchmarks and the sweeps built on them. Every function is
//! deterministic in its seed; records carry simulated times only.

mod calibrate;

pub use calibrate::{
    calibrate, fit_machine, mram_bandwidth_mbps, wram_bandwidth_mbps, Calibration, TARGET_MRAM_READ, TARGET_MRAM_WRITE,
    TARGET_WRAM,
};

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::host::{EventKind, SchedMode, Session, SessionOptions, TransferMode};
use crate::kernels::{multipass_radix_partition, KernelConfig, MramArray};
use crate::machine::{Dpu, KernelMetrics, MachineConfig};
use crate::ops::aggregate::{AggFn, AggSpec};
use crate::ops::{
    aggregate_hash, aggregate_sort, fetch_rows, join_hash, join_sort_merge, load_rows, order_global, select, CmpOp,
    DistTable, Pred,
};

/// First line of every metrics CSV.
pub const METRICS_SCHEMA: &str = "# pimsim-metrics v1";

/// One measured configuration point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub experiment: String,
    pub op: String,
    pub dpus: usize,
    pub tasklets: usize,
    pub rows_per_dpu: usize,
    /// Experiment-specific knob: unique keys, bits per pass, ...
    pub param: u64,
    pub rep: usize,
    pub seed: u64,
    /// Sum over launches of the slowest DPU.
    pub kernel_seconds: f64,
    pub ipc: f64,
    pub transfer_seconds: f64,
    pub makespan_seconds: f64,
    pub instructions: u64,
    pub dma_bytes: u64,
}

/// Writes records as CSV preceded by the schema line.
pub fn write_records_csv(records: &[BenchRecord], mut w: impl Write) -> Result<()> {
    writeln!(w, "{METRICS_SCHEMA}").map_err(|e| SimError::Io(e.to_string()))?;
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r).map_err(|e| SimError::Io(e.to_string()))?;
    }
    if records.is_empty() {
        out.write_record([
            "experiment",
            "op",
            "dpus",
            "tasklets",
            "rows_per_dpu",
            "param",
            "rep",
            "seed",
            "kernel_seconds",
            "ipc",
            "transfer_seconds",
            "makespan_seconds",
            "instructions",
            "dma_bytes",
        ])
        .map_err(|e| SimError::Io(e.to_string()))?;
    }
    out.flush().map_err(|e| SimError::Io(e.to_string()))
}

/// Operators with a microbenchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MicroOp {
    Selection,
    AggregateHash,
    AggregateSort,
    Order,
    JoinHash,
    JoinSortMerge,
}

impl MicroOp {
    pub const ALL: [MicroOp; 6] = [
        MicroOp::Selection,
        MicroOp::AggregateHash,
        MicroOp::AggregateSort,
        MicroOp::Order,
        MicroOp::JoinHash,
        MicroOp::JoinSortMerge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MicroOp::Selection => "selection",
            MicroOp::AggregateHash => "aggregate_hash",
            MicroOp::AggregateSort => "aggregate_sort",
            MicroOp::Order => "order",
            MicroOp::JoinHash => "join_hash",
            MicroOp::JoinSortMerge => "join_sort_merge",
        }
    }

    /// Default knob: percent selected, unique keys, unused otherwise.
    pub fn default_param(self) -> u64 {
        match self {
            MicroOp::Selection => 20,
            MicroOp::AggregateHash | MicroOp::AggregateSort => 50,
            _ => 0,
        }
    }
}

impl fmt::Display for MicroOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MicroOp {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        MicroOp::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| SimError::Config(format!("unknown operator {s}")))
    }
}

/// One microbenchmark configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroSpec {
    pub op: MicroOp,
    pub dpus: usize,
    pub tasklets: usize,
    pub rows_per_dpu: usize,
    pub param: u64,
    /// Words per record; the key is word 0.
    pub width: usize,
    pub seed: u64,
}

impl MicroSpec {
    pub fn new(op: MicroOp, dpus: usize, tasklets: usize, rows_per_dpu: usize, seed: u64) -> Self {
        MicroSpec { op, dpus, tasklets, rows_per_dpu, param: op.default_param(), width: 2, seed }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Per-DPU records: key from `key`, then the row's global index, then
/// zero padding up to `width` words.
fn records(dpus: usize, rows: usize, width: usize, seed: u64, mut key: impl FnMut(&mut ChaCha8Rng) -> u64) -> Vec<Vec<u64>> {
    (0..dpus)
        .map(|d| {
            let mut r = rng_for(seed, d as u64);
            let mut v = Vec::with_capacity(rows * width);
            for i in 0..rows {
                v.push(key(&mut r));
                if width > 1 {
                    v.push((d * rows + i) as u64);
                }
                v.extend(std::iter::repeat(0).take(width.saturating_sub(2)));
            }
            v
        })
        .collect()
}

/// Inner relation of unique keys and an outer relation of twice the size
/// drawing from the same key range.
fn join_inputs(dpus: usize, rows: usize, seed: u64) -> (Vec<Vec<u64>>, Vec<Vec<u64>>) {
    let n = dpus * rows;
    let mut r = rng_for(seed, u64::MAX);
    let mut keys: Vec<u64> = (0..n as u64).collect();
    keys.shuffle(&mut r);
    let inner = (0..dpus)
        .map(|d| (d * rows..(d + 1) * rows).flat_map(|i| [keys[i], i as u64]).collect())
        .collect();
    let span = n.max(1) as u64;
    let outer = records(dpus, 2 * rows, 2, seed ^ 0x9e37_79b9, |r| r.gen_range(0..span));
    (inner, outer)
}

/// Kernel and transfer totals of everything a session recorded.
pub fn summarize(s: &Session, experiment: &str, op: &str, spec_rows: usize, param: u64, seed: u64) -> Result<BenchRecord> {
    let tl = s.timeline()?;
    let mut kernel_cycles = 0u64;
    let (mut instr, mut cycles, mut dma) = (0u64, 0u64, 0u64);
    for l in &s.launches {
        kernel_cycles += l.metrics.iter().map(|m| m.cycles).max().unwrap_or(0);
        for m in &l.metrics {
            instr += m.instructions;
            cycles += m.cycles;
            dma += m.dma_read_bytes + m.dma_write_bytes;
        }
    }
    let transfer_ns = tl.busy_ns(EventKind::H2p) + tl.busy_ns(EventKind::P2h);
    Ok(BenchRecord {
        experiment: experiment.to_string(),
        op: op.to_string(),
        dpus: s.dpu_count(),
        tasklets: s.tasklets(),
        rows_per_dpu: spec_rows,
        param,
        rep: 0,
        seed,
        kernel_seconds: s.machine.cycles_to_seconds(kernel_cycles),
        ipc: if cycles == 0 { 0.0 } else { instr as f64 / cycles as f64 },
        transfer_seconds: transfer_ns as f64 * 1e-9,
        makespan_seconds: tl.makespan_ns as f64 * 1e-9,
        instructions: instr,
        dma_bytes: dma,
    })
}

/// Output of [`run_micro_session`]: the session after the run and the
/// operator's output table (for joins and selections) or none.
pub struct MicroRun {
    pub session: Session,
    pub output: Option<DistTable>,
}

/// Loads the inputs, forgets the load, and runs the operator.
pub fn run_micro_session(machine: &MachineConfig, spec: &MicroSpec, opts: &SessionOptions) -> Result<MicroRun> {
    let m = machine.with_dpus(spec.dpus);
    let mut o = opts.clone();
    o.kernel.tasklets = spec.tasklets;
    let mut s = Session::new(&m, o)?;
    let (n, w, seed) = (spec.rows_per_dpu, spec.width.max(1), spec.seed);
    let names: Vec<String> = (0..w).map(|i| format!("c{i}")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let output = match spec.op {
        MicroOp::Selection => {
            let t = load_rows(&mut s, &names, &records(spec.dpus, n, w, seed, |r| r.gen_range(0..100)))?;
            s.clear_log();
            Some(select(&mut s, &t, &[Pred::cmp(0, CmpOp::Lt, spec.param as i64)])?)
        }
        MicroOp::AggregateHash | MicroOp::AggregateSort => {
            let u = spec.param.max(1);
            let t = load_rows(&mut s, &names, &records(spec.dpus, n, w.max(2), seed, |r| r.gen_range(0..u)))?;
            s.clear_log();
            let spec_a = AggSpec::new(vec![AggFn::Sum(1)]);
            Some(if spec.op == MicroOp::AggregateHash {
                aggregate_hash(&mut s, &t, &spec_a)?
            } else {
                aggregate_sort(&mut s, &t, &spec_a)?
            })
        }
        MicroOp::Order => {
            let t = load_rows(&mut s, &names, &records(spec.dpus, n, w, seed, |r| r.gen::<u32>() as u64))?;
            s.clear_log();
            Some(order_global(&mut s, &t)?)
        }
        MicroOp::JoinHash | MicroOp::JoinSortMerge => {
            let (inner, outer) = join_inputs(spec.dpus, n, seed);
            let i = load_rows(&mut s, &["k", "i"], &inner)?;
            let o = load_rows(&mut s, &["k", "o"], &outer)?;
            s.clear_log();
            Some(if spec.op == MicroOp::JoinHash {
                join_hash(&mut s, &i, &o)?
            } else {
                join_sort_merge(&mut s, &i, &o)?
            })
        }
    };
    Ok(MicroRun { session: s, output })
}

/// Runs one microbenchmark and summarizes it.
pub fn run_micro(machine: &MachineConfig, spec: &MicroSpec, opts: &SessionOptions) -> Result<BenchRecord> {
    let r = run_micro_session(machine, spec, opts)?;
    summarize(&r.session, "micro", spec.op.name(), spec.rows_per_dpu, spec.param, spec.seed)
}

/// IPC and time of one operator on one DPU for each tasklet count.
pub fn ipc_sweep(machine: &MachineConfig, op: MicroOp, tasklets: &[usize], rows: usize, width: usize, seed: u64) -> Result<Vec<BenchRecord>> {
    tasklets
        .iter()
        .map(|&t| {
            let spec = MicroSpec { width, ..MicroSpec::new(op, 1, t, rows, seed) };
            let mut r = run_micro(machine, &spec, &SessionOptions::default())?;
            r.experiment = "ipc".into();
            Ok(r)
        })
        .collect()
}

/// Hash and sort aggregation over the same input for each unique-key count.
/// Returns (hash, sort) record pairs.
pub fn agg_crossover(machine: &MachineConfig, uniques: &[u64], rows: usize, tasklets: usize, seed: u64) -> Result<Vec<(BenchRecord, BenchRecord)>> {
    uniques
        .iter()
        .map(|&u| {
            let mut pair = Vec::new();
            for op in [MicroOp::AggregateHash, MicroOp::AggregateSort] {
                let spec = MicroSpec { param: u, ..MicroSpec::new(op, 1, tasklets, rows, seed) };
                let mut r = run_micro(machine, &spec, &SessionOptions::default())?;
                r.experiment = "agg_crossover".into();
                pair.push(r);
            }
            let s = pair.pop().expect("two records");
            Ok((pair.pop().expect("two records"), s))
        })
        .collect()
}

/// Multipass radix partitioning of `rows` random records into
/// `2^total_bits` groups for each bits-per-pass value.
pub fn radix_sweep(machine: &MachineConfig, bits_per_pass: &[u32], total_bits: u32, rows: usize, tasklets: usize, seed: u64) -> Result<Vec<BenchRecord>> {
    let data = &records(1, rows, 2, seed, |r| r.gen::<u64>())[0];
    bits_per_pass
        .iter()
        .map(|&b| {
            let kc = KernelConfig::default().with_tasklets(tasklets);
            let mut d = Dpu::new(0, machine.mram_bytes, machine.wram_bytes);
            if !data.is_empty() {
                d.mram.write(0, data)?;
            }
            let region = MramArray::new(0, rows, 2);
            let out = multipass_radix_partition(machine, &mut d, region, region.bytes(), total_bits, b, &kc)?;
            let ms: &[KernelMetrics] = &out.metrics;
            let cycles: u64 = ms.iter().map(|m| m.cycles).sum();
            let instr: u64 = ms.iter().map(|m| m.instructions).sum();
            Ok(BenchRecord {
                experiment: "radix_sweep".into(),
                op: "radix_partition".into(),
                dpus: 1,
                tasklets,
                rows_per_dpu: rows,
                param: b as u64,
                rep: 0,
                seed,
                kernel_seconds: machine.cycles_to_seconds(cycles),
                ipc: if cycles == 0 { 0.0 } else { instr as f64 / cycles as f64 },
                transfer_seconds: 0.0,
                makespan_seconds: machine.cycles_to_seconds(cycles),
                instructions: instr,
                dma_bytes: ms.iter().map(|m| m.dma_read_bytes + m.dma_write_bytes).sum(),
            })
        })
        .collect()
}

/// Strong scaling keeps `rows` records in total; weak scaling gives every
/// DPU `rows` records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    Strong,
    Weak,
}

pub fn scaling(machine: &MachineConfig, op: MicroOp, mode: Scaling, dpus: &[usize], rows: usize, tasklets: usize, seed: u64) -> Result<Vec<BenchRecord>> {
    dpus.iter()
        .map(|&d| {
            let per = match mode {
                Scaling::Strong => rows / d,
                Scaling::Weak => rows,
            };
            let spec = MicroSpec::new(op, d, tasklets, per, seed);
            let mut r = run_micro(machine, &spec, &SessionOptions::default())?;
            r.experiment = match mode {
                Scaling::Strong => "strong_scaling",
                Scaling::Weak => "weak_scaling",
            }
            .into();
            Ok(r)
        })
        .collect()
}

/// Global ordering under each transfer optimization: naive, scatter/gather
/// and pooled scatter/gather with synchronous scheduling, then the pooled
/// variant scheduled asynchronously. `param` numbers the variants 0..4.
pub fn transfer_modes(machine: &MachineConfig, dpus: usize, rows: usize, tasklets: usize, seed: u64) -> Result<Vec<BenchRecord>> {
    let variants = [
        ("naive", TransferMode::Naive, SchedMode::Sync),
        ("scatter_gather", TransferMode::Scatter, SchedMode::Sync),
        ("scatter_pooled", TransferMode::ScatterPooled, SchedMode::Sync),
        ("scatter_pooled_async", TransferMode::ScatterPooled, SchedMode::Async),
    ];
    variants
        .iter()
        .enumerate()
        .map(|(i, &(name, transfer, sched))| {
            let opts = SessionOptions { transfer, sched, ..SessionOptions::default() };
            let spec = MicroSpec::new(MicroOp::Order, dpus, tasklets, rows, seed);
            let run = run_micro_session(machine, &spec, &opts)?;
            let mut r = summarize(&run.session, "transfer", &format!("order/{name}"), rows, i as u64, seed)?;
            r.rep = 0;
            Ok(r)
        })
        .collect()
}

/// Shapes of the pipelines used to judge asynchronous scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineShape {
    /// Several rounds of load, filter and read back, with the largest batch
    /// moving from rank to rank each round.
    TransferHeavy,
    /// One load of equal batches, a hash aggregation and a read of the
    /// small partial results.
    Aggregation,
}

/// Records the pipeline of `shape` on a fresh session.
pub fn pipeline_session(machine: &MachineConfig, shape: PipelineShape, dpus: usize, rows: usize, seed: u64, opts: &SessionOptions) -> Result<Session> {
    let m = machine.with_dpus(dpus);
    let mut s = Session::new(&m, opts.clone())?;
    let ranks = m.rank_count();
    match shape {
        PipelineShape::TransferHeavy => {
            for round in 0..ranks {
                let per: Vec<Vec<u64>> = (0..dpus)
                    .map(|d| {
                        let big = (m.rank_of(d) + round) % ranks == 0;
                        let n = if big { 4 * rows } else { rows };
                        records(1, n, 2, seed ^ (round * dpus + d) as u64, |r| r.gen_range(0..100)).remove(0)
                    })
                    .collect();
                let mark = s.heap_mark();
                let t = load_rows(&mut s, &["k", "v"], &per)?;
                let f = select(&mut s, &t, &[Pred::cmp(0, CmpOp::Lt, 50)])?;
                fetch_rows(&mut s, &f)?;
                s.heap_release(mark);
            }
        }
        PipelineShape::Aggregation => {
            let per = records(dpus, rows, 2, seed, |r| r.gen_range(0..50));
            let t = load_rows(&mut s, &["k", "v"], &per)?;
            let a = aggregate_hash(&mut s, &t, &AggSpec::new(vec![AggFn::Sum(1)]))?;
            fetch_rows(&mut s, &a)?;
        }
    }
    Ok(s)
}

/// Makespans in ns of the same recorded pipeline scheduled synchronously
/// and asynchronously.
pub fn async_gain(machine: &MachineConfig, shape: PipelineShape, dpus: usize, rows: usize, seed: u64) -> Result<(u64, u64)> {
    let s = pipeline_session(machine, shape, dpus, rows, seed, &SessionOptions::default())?;
    let sync = s.timeline_with(SchedMode::Sync)?.makespan_ns;
    let asyn = s.timeline_with(SchedMode::Async)?.makespan_ns;
    Ok((sync, asyn))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_ops_parse_and_run() {
        let m = MachineConfig::desk();
        for op in MicroOp::ALL {
            assert_eq!(op.name().parse::<MicroOp>().unwrap(), op);
            let r = run_micro(&m, &MicroSpec::new(op, 4, 12, 500, 1), &SessionOptions::default()).unwrap();
            assert!(r.kernel_seconds > 0.0 && r.ipc > 0.0 && r.ipc <= 1.0, "{op}: {r:?}");
        }
        assert!("sort".parse::<MicroOp>().is_err());
    }

    #[test]
    fn csv_has_schema_line_and_header() {
        let m = MachineConfig::desk();
        let r = run_micro(&m, &MicroSpec::new(MicroOp::Selection, 1, 4, 100, 1), &SessionOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_records_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(METRICS_SCHEMA));
        assert!(lines.next().unwrap().starts_with("experiment,op,dpus,tasklets"));
        let mut empty = Vec::new();
        write_records_csv(&[], &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().lines().count(), 2);
    }

    #[test]
    fn runs_are_deterministic() {
        let m = MachineConfig::desk();
        let spec = MicroSpec::new(MicroOp::JoinHash, 8, 16, 700, 9);
        let a = run_micro(&m, &spec, &SessionOptions::default()).unwrap();
        assert_eq!(a, run_micro(&m, &spec, &SessionOptions::default()).unwrap());
    }
}
