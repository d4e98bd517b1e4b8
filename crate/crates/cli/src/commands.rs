//! Subcommand bodies. Each returns whether its verification passed;
//! commands without a verification step always pass.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pimsim::experiments::{
    self, agg_crossover, ipc_sweep, pipeline_session, radix_sweep, run_micro, scaling, summarize, transfer_modes,
    write_records_csv, BenchRecord, MicroOp, MicroSpec, PipelineShape, Scaling,
};
use pimsim::host::{EventKind, SchedMode, Session, SessionOptions, Timeline, TimelineEvent};
use pimsim::machine::MachineConfig;
use pimsim::query::{generate, oracle_query, run_query, ColumnTable, GenSpec, QueryOptions};
use pimsim::SimError;

use crate::args::{Format, Preset};

/// Settings every subcommand sees.
pub struct Ctx {
    pub machine: MachineConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
}

/// A usage problem found after argument parsing.
fn config_err(msg: impl Into<String>) -> anyhow::Error {
    SimError::Config(msg.into()).into()
}

impl Ctx {
    fn format_or(&self, default: Format, allowed: &[Format], what: &str) -> Result<Format> {
        let f = self.format.unwrap_or(default);
        if !allowed.contains(&f) {
            return Err(config_err(format!("{what} cannot be written as {f:?}")));
        }
        Ok(f)
    }

    /// The output file, or stdout.
    fn sink(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                }
                let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
                Box::new(BufWriter::new(f))
            }
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }

    /// The output directory, created if missing.
    fn out_dir(&self, what: &str) -> Result<&Path> {
        let dir = self.out.as_deref().ok_or_else(|| config_err(format!("{what} needs --out DIR")))?;
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn check_tasklets(&self, ts: &[usize]) -> Result<()> {
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.machine.max_tasklets) {
            return Err(config_err(format!("tasklet count {t} outside 1..={}", self.machine.max_tasklets)));
        }
        Ok(())
    }

    fn check_dpus(&self, ds: &[usize]) -> Result<()> {
        if let Some(&d) = ds.iter().find(|&&d| d == 0) {
            return Err(config_err(format!("dpu count {d} must be positive")));
        }
        Ok(())
    }

    /// Rough bank memory need: input, scratch and output copies of the
    /// widest relation (twice the rows for a join's outer side).
    fn check_rows(&self, rows: usize, width: usize) -> Result<()> {
        let need = rows as u64 * width.max(2) as u64 * 8 * 2 * 4;
        if need > self.machine.mram_bytes {
            return Err(config_err(format!(
                "{rows} rows of {width} words per DPU do not fit {} bytes of bank memory",
                self.machine.mram_bytes
            )));
        }
        Ok(())
    }

    pub fn write_records(&self, recs: &[BenchRecord]) -> Result<()> {
        let mut w = self.sink()?;
        match self.format_or(Format::Csv, &[Format::Csv, Format::Json], "metrics")? {
            Format::Json => {
                serde_json::to_writer_pretty(&mut w, recs)?;
                writeln!(w)?;
            }
            _ => write_records_csv(recs, &mut w)?,
        }
        w.flush()?;
        Ok(())
    }
}

pub struct BenchArgs {
    pub op: MicroOp,
    pub dpus: Vec<usize>,
    pub tasklets: Vec<usize>,
    pub rows: usize,
    pub param: Option<u64>,
    pub width: usize,
    pub reps: usize,
    pub preset: Preset,
    pub fixed_size: bool,
}

/// One record per (dpus, tasklets, repetition). Repetition `r` draws its
/// data from seed + r. With `fixed_size`, `rows` is the total split over
/// the DPUs rather than a per-DPU count.
pub fn bench(ctx: &Ctx, a: &BenchArgs) -> Result<bool> {
    ctx.check_dpus(&a.dpus)?;
    ctx.check_tasklets(&a.tasklets)?;
    if a.reps == 0 || a.width == 0 {
        return Err(config_err("--reps and --width must be positive"));
    }
    let per_dpu = |d: usize| if a.fixed_size { a.rows / d } else { a.rows };
    for &d in &a.dpus {
        ctx.check_rows(per_dpu(d), a.width)?;
    }
    let opts = a.preset.session();
    let mut recs = Vec::new();
    for &d in &a.dpus {
        for &t in &a.tasklets {
            for rep in 0..a.reps {
                let seed = ctx.seed.wrapping_add(rep as u64);
                let mut spec = MicroSpec { width: a.width, ..MicroSpec::new(a.op, d, t, per_dpu(d), seed) };
                if let Some(p) = a.param {
                    spec.param = p;
                }
                let mut r = run_micro(&ctx.machine, &spec, &opts)?;
                r.experiment = if a.fixed_size { "strong_scaling" } else { "bench" }.into();
                r.rep = rep;
                recs.push(r);
            }
        }
    }
    ctx.write_records(&recs)?;
    Ok(true)
}

pub struct QueryArgs {
    pub qid: u32,
    pub sf: f64,
    pub preset: Preset,
    pub agg: pimsim::ops::AggAlgo,
    pub join: pimsim::ops::JoinAlgo,
    pub dpus: Option<usize>,
    pub tasklets: Option<usize>,
}

/// Runs a query, checks it against the host oracle and prints a verdict
/// with the time breakdown. With --out DIR, writes the result table and
/// the timeline there.
pub fn query(ctx: &Ctx, a: &QueryArgs) -> Result<bool> {
    if !(a.sf > 0.0) {
        return Err(config_err(format!("scale factor {} must be positive", a.sf)));
    }
    pimsim::query::expected_ops(a.qid)?;
    let machine = match a.dpus {
        Some(d) => {
            ctx.check_dpus(&[d])?;
            ctx.machine.with_dpus(d)
        }
        None => ctx.machine.clone(),
    };
    let mut session = a.preset.session();
    if let Some(t) = a.tasklets {
        ctx.check_tasklets(&[t])?;
        session.kernel.tasklets = t;
    }
    let tables = generate(&GenSpec::new(a.sf, ctx.seed))?;
    let opts = QueryOptions { agg: a.agg, join: a.join, session };
    let run = run_query(a.qid, &tables, &machine, &opts)?;
    let want = oracle_query(a.qid, &tables)?;
    if ctx.out.is_some() {
        let dir = ctx.out_dir("query")?;
        let fmt = ctx.format_or(Format::Csv, &[Format::Csv, Format::Bin], "query results")?;
        write_table(&run.result, dir, fmt)?;
        let tl = dir.join(format!("q{}.timeline.json", a.qid));
        write_events(&run.timeline.events, &tl, Format::Json)?;
    }
    let tl = &run.timeline;
    let ns = |k: EventKind| tl.busy_ns(k) as f64 * 1e-9;
    let breakdown = format!(
        "kernel {:.6} s, transfer {:.6} s, host {:.6} s, makespan {:.6} s",
        machine.cycles_to_seconds(run.kernel_cycles()),
        ns(EventKind::H2p) + ns(EventKind::P2h),
        ns(EventKind::HostAlloc) + ns(EventKind::HostReorder),
        tl.makespan_ns as f64 * 1e-9
    );
    match first_difference(&run.result, &want) {
        None => {
            println!("PASS q{} sf {}: {} rows; {breakdown}", a.qid, a.sf, run.result.row_count());
            Ok(true)
        }
        Some(d) => {
            println!("FAIL q{} sf {}: {d}; {breakdown}", a.qid, a.sf);
            Ok(false)
        }
    }
}

/// Describes the first row where `got` and `want` disagree.
pub fn first_difference(got: &ColumnTable, want: &ColumnTable) -> Option<String> {
    let (g, w) = (got.rows(), want.rows());
    for i in 0..g.len().max(w.len()) {
        match (g.get(i), w.get(i)) {
            (Some(a), Some(b)) if a == b => {}
            (a, b) => return Some(format!("first differing row {i}: got {a:?}, expected {b:?}")),
        }
    }
    if got != want {
        return Some("rows agree but the schemas differ".into());
    }
    None
}

fn write_table(t: &ColumnTable, dir: &Path, fmt: Format) -> Result<()> {
    let ext = if fmt == Format::Bin { "bin" } else { "csv" };
    let path = dir.join(format!("{}.{ext}", t.name));
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    if fmt == Format::Bin {
        t.write_binary(&mut w)?;
    } else {
        t.write_csv(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

fn encode_events(events: &[TimelineEvent], fmt: Format, mut w: impl Write) -> Result<()> {
    if fmt == Format::Csv {
        writeln!(w, "kind,rank,start_ns,end_ns,bytes")?;
        for e in events {
            let kind = serde_json::to_value(e.kind)?;
            let rank = e.rank.map(|r| r.to_string()).unwrap_or_default();
            writeln!(w, "{},{rank},{},{},{}", kind.as_str().unwrap_or_default(), e.start_ns, e.end_ns, e.bytes)?;
        }
    } else {
        serde_json::to_writer_pretty(&mut w, events)?;
        writeln!(w)?;
    }
    Ok(())
}

fn write_events(events: &[TimelineEvent], path: &Path, fmt: Format) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    encode_events(events, fmt, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Recorded work whose timeline the `timeline` command exports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TimelineExperiment {
    /// Global ordering, dominated by the all-to-all redistribution.
    Order,
    /// Rounds of load, filter and read back with a moving large batch.
    TransferHeavy,
    /// One load, a hash aggregation and a small read back.
    Aggregation,
    Q1,
    Q3,
    Q4,
    Q5,
    Q6,
}

pub struct TimelineArgs {
    pub experiment: TimelineExperiment,
    pub preset: Preset,
    pub dpus: Option<usize>,
    pub rows: usize,
    pub tasklets: usize,
    pub sf: f64,
}

pub fn timeline(ctx: &Ctx, a: &TimelineArgs) -> Result<bool> {
    use TimelineExperiment as E;
    let dpus = a.dpus.unwrap_or(ctx.machine.dpu_count);
    ctx.check_dpus(&[dpus])?;
    ctx.check_tasklets(&[a.tasklets])?;
    let mut opts = a.preset.session();
    opts.kernel.tasklets = a.tasklets;
    let tl: Timeline = match a.experiment {
        E::Order => {
            ctx.check_rows(a.rows, 2)?;
            let spec = MicroSpec::new(MicroOp::Order, dpus, a.tasklets, a.rows, ctx.seed);
            experiments::run_micro_session(&ctx.machine, &spec, &opts)?.session.timeline()?
        }
        E::TransferHeavy | E::Aggregation => {
            ctx.check_rows(4 * a.rows, 2)?;
            let shape = if a.experiment == E::Aggregation { PipelineShape::Aggregation } else { PipelineShape::TransferHeavy };
            pipeline_session(&ctx.machine, shape, dpus, a.rows, ctx.seed, &opts)?.timeline()?
        }
        q => {
            let qid = match q {
                E::Q1 => 1,
                E::Q3 => 3,
                E::Q4 => 4,
                E::Q5 => 5,
                _ => 6,
            };
            let tables = generate(&GenSpec::new(a.sf, ctx.seed))?;
            let qo = QueryOptions { session: opts, ..QueryOptions::default() };
            run_query(qid, &tables, &ctx.machine.with_dpus(dpus), &qo)?.timeline
        }
    };
    let fmt = ctx.format_or(Format::Json, &[Format::Json, Format::Csv], "timelines")?;
    let mut w = ctx.sink()?;
    encode_events(&tl.events, fmt, &mut w)?;
    w.flush()?;
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepKind {
    /// IPC and time over tasklet counts on one DPU.
    Ipc,
    /// Hash against sort aggregation over unique key counts.
    AggCrossover,
    /// Multipass radix partitioning over bits per pass.
    Radix,
    /// Fixed total size over DPU counts.
    Strong,
    /// Fixed per-DPU size over DPU counts.
    Weak,
    /// Global ordering under each transfer optimization.
    Transfer,
    /// Both pipeline shapes scheduled synchronously and asynchronously.
    Async,
}

pub struct SweepArgs {
    pub kind: SweepKind,
    pub op: MicroOp,
    pub dpus: Option<Vec<usize>>,
    pub tasklets: Option<Vec<usize>>,
    pub rows: Option<usize>,
    pub width: usize,
    pub uniques: Vec<u64>,
    pub bits_per_pass: Vec<u64>,
    pub total_bits: u32,
}

/// Runs one of the canned experiments with desk-scale defaults.
pub fn sweep(ctx: &Ctx, a: &SweepArgs) -> Result<bool> {
    let m = &ctx.machine;
    let seed = ctx.seed;
    let one = |v: &Option<Vec<usize>>, d: usize| v.as_ref().and_then(|v| v.first().copied()).unwrap_or(d);
    let dpus = a.dpus.clone().unwrap_or_else(|| vec![4, 8, 16, 32]);
    ctx.check_dpus(&dpus)?;
    if let Some(t) = &a.tasklets {
        ctx.check_tasklets(t)?;
    }
    let recs: Vec<BenchRecord> = match a.kind {
        SweepKind::Ipc => {
            let ts = a.tasklets.clone().unwrap_or_else(|| (1..=24.min(m.max_tasklets)).collect());
            let rows = a.rows.unwrap_or(65536);
            ctx.check_rows(rows, a.width)?;
            ipc_sweep(m, a.op, &ts, rows, a.width, seed)?
        }
        SweepKind::AggCrossover => {
            let rows = a.rows.unwrap_or(65536);
            ctx.check_rows(rows, 2)?;
            agg_crossover(m, &a.uniques, rows, one(&a.tasklets, 16), seed)?
                .into_iter()
                .flat_map(|(h, s)| [h, s])
                .collect()
        }
        SweepKind::Radix => {
            let rows = a.rows.unwrap_or(65536);
            ctx.check_rows(rows, 2)?;
            let bpp: Vec<u32> = a.bits_per_pass.iter().map(|&b| b as u32).collect();
            radix_sweep(m, &bpp, a.total_bits, rows, one(&a.tasklets, 16), seed)?
        }
        SweepKind::Strong => {
            let total = a.rows.unwrap_or(1 << 19);
            ctx.check_rows(total / dpus.iter().min().copied().unwrap_or(1), 2)?;
            scaling(m, a.op, Scaling::Strong, &dpus, total, one(&a.tasklets, 16), seed)?
        }
        SweepKind::Weak => {
            let rows = a.rows.unwrap_or(16384);
            ctx.check_rows(rows, 2)?;
            scaling(m, a.op, Scaling::Weak, &dpus, rows, one(&a.tasklets, 16), seed)?
        }
        SweepKind::Transfer => {
            let rows = a.rows.unwrap_or(8192);
            ctx.check_rows(rows, 2)?;
            transfer_modes(m, one(&a.dpus, m.dpu_count), rows, one(&a.tasklets, 16), seed)?
        }
        SweepKind::Async => {
            let rows = a.rows.unwrap_or(8192);
            ctx.check_rows(4 * rows, 2)?;
            let d = one(&a.dpus, 16);
            let mut out = Vec::new();
            for (shape, name) in [(PipelineShape::TransferHeavy, "transfer_heavy"), (PipelineShape::Aggregation, "aggregation")] {
                for (i, sched) in [SchedMode::Sync, SchedMode::Async].into_iter().enumerate() {
                    let opts = SessionOptions { sched, ..SessionOptions::default() };
                    let s: Session = pipeline_session(m, shape, d, rows, seed, &opts)?;
                    let label = format!("{name}/{}", if i == 0 { "sync" } else { "async" });
                    let mut r = summarize(&s, "async", &label, rows, i as u64, seed)?;
                    r.tasklets = opts.kernel.tasklets;
                    out.push(r);
                }
            }
            out
        }
    };
    ctx.write_records(&recs)?;
    Ok(true)
}

/// Writes every generated table into --out DIR.
pub fn gen(ctx: &Ctx, sf: f64) -> Result<bool> {
    if !(sf > 0.0) {
        return Err(config_err(format!("scale factor {sf} must be positive")));
    }
    let dir = ctx.out_dir("gen")?;
    let fmt = ctx.format_or(Format::Bin, &[Format::Csv, Format::Bin], "tables")?;
    let tables = generate(&GenSpec::new(sf, ctx.seed))?;
    for t in tables.0.values() {
        write_table(t, dir, fmt)?;
        eprintln!("{}: {} rows", t.name, t.row_count());
    }
    Ok(true)
}

/// Fits the clock and DMA slope to the bandwidth targets and writes the
/// resulting machine config as TOML; `measure_only` just reports.
pub fn calibrate(ctx: &Ctx, measure_only: bool) -> Result<bool> {
    let report = |tag: &str, c: &experiments::Calibration| {
        eprintln!(
            "{tag}: mram read {:.1} MB/s (target {}), write {:.1} MB/s (target {}), scratchpad {:.1} MB/s (target {}), worst error {:.2}%",
            c.mram_read_mbps,
            experiments::TARGET_MRAM_READ,
            c.mram_write_mbps,
            experiments::TARGET_MRAM_WRITE,
            c.wram_mbps,
            experiments::TARGET_WRAM,
            100.0 * c.max_error()
        );
    };
    let before = experiments::calibrate(&ctx.machine)?;
    report("current", &before);
    if measure_only {
        return Ok(before.max_error() < 0.10);
    }
    let fit = experiments::fit_machine(&ctx.machine)?;
    report("fitted", &fit);
    let mut w = ctx.sink()?;
    w.write_all(fit.machine.to_toml_string().as_bytes())?;
    w.flush()?;
    if fit.max_error() >= 0.10 {
        bail!(SimError::Internal(format!("fit still {:.1}% off", 100.0 * fit.max_error())));
    }
    Ok(true)
}
