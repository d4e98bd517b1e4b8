//! `pimsim`: runs microbenchmarks, sweeps, queries and calibration on the
//! simulator and writes machine-readable results.
//!
//! Exit status: 0 on success, 1 when a verification fails or a run hits
//! a simulator fault, 2 on bad arguments or configuration.

mod args;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pimsim::experiments::MicroOp;
use pimsim::machine::MachineConfig;
use pimsim::ops::{AggAlgo, JoinAlgo};
use pimsim::SimError;

use args::{Format, List, Preset};
use commands::{BenchArgs, Ctx, QueryArgs, SweepArgs, SweepKind, TimelineArgs, TimelineExperiment};

#[derive(Parser)]
#[command(name = "pimsim", version, about = "Processing-in-memory database operator simulator")]
struct Cli {
    /// Machine config (TOML); defaults to the 32-DPU desk profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every generated input.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Output file, or directory for commands writing several files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output encoding; each command documents what it accepts.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Operator microbenchmark over DPU and tasklet lists.
    Bench {
        #[arg(long, value_parser = parse_op)]
        op: MicroOp,
        /// DPU counts, e.g. `8,16,32` or `1..4`.
        #[arg(long, default_value = "1")]
        dpus: List,
        /// Tasklet counts, e.g. `1..24`.
        #[arg(long, default_value = "16")]
        tasklets: List,
        /// Records per DPU, or in total with --fixed-size.
        #[arg(long, default_value_t = 65536)]
        rows: usize,
        /// Operator knob: percent selected, or unique keys for aggregations.
        #[arg(long)]
        param: Option<u64>,
        /// Words per record.
        #[arg(long, default_value_t = 2)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        reps: usize,
        #[arg(long, value_enum, default_value_t = Preset::Async)]
        transfer: Preset,
        /// Keep the total size fixed across DPU counts (strong scaling).
        #[arg(long)]
        fixed_size: bool,
    },
    /// Runs a query and checks it against the host oracle.
    Query {
        qid: u32,
        #[arg(long, default_value_t = 0.01)]
        sf: f64,
        /// Transfer optimizations; `optimized` is an alias for `async`.
        #[arg(long, value_enum, default_value_t = Preset::Async)]
        mode: Preset,
        #[arg(long, value_parser = parse_agg, default_value = "hash")]
        agg: AggAlgo,
        #[arg(long, value_parser = parse_join, default_value = "hash")]
        join: JoinAlgo,
        #[arg(long)]
        dpus: Option<usize>,
        #[arg(long)]
        tasklets: Option<usize>,
    },
    /// Exports the transfer and kernel events of an experiment.
    Timeline {
        #[arg(value_enum)]
        experiment: TimelineExperiment,
        #[arg(long, value_enum, default_value_t = Preset::Async)]
        mode: Preset,
        #[arg(long)]
        dpus: Option<usize>,
        /// Records per DPU for the operator pipelines.
        #[arg(long, default_value_t = 8192)]
        rows: usize,
        #[arg(long, default_value_t = 16)]
        tasklets: usize,
        /// Scale factor for the query experiments.
        #[arg(long, default_value_t = 0.01)]
        sf: f64,
    },
    /// Canned experiment sweeps.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
        #[arg(long, value_parser = parse_op, default_value = "selection")]
        op: MicroOp,
        #[arg(long)]
        dpus: Option<List>,
        #[arg(long)]
        tasklets: Option<List>,
        /// Records per DPU (strong scaling: in total).
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long, default_value_t = 2)]
        width: usize,
        #[arg(long, default_value = "2^6..2^20")]
        uniques: List,
        #[arg(long, default_value = "3..6")]
        bits_per_pass: List,
        #[arg(long, default_value_t = 15)]
        total_bits: u32,
    },
    /// Generates the query tables into --out DIR.
    Gen {
        #[arg(long, default_value_t = 0.01)]
        sf: f64,
    },
    /// Fits clock and DMA slope to the bandwidth targets; writes TOML.
    Calibrate {
        /// Only measure the current config.
        #[arg(long)]
        measure_only: bool,
    },
}

fn parse_op(s: &str) -> Result<MicroOp, String> {
    s.parse::<MicroOp>().map_err(|_| {
        let names: Vec<&str> = MicroOp::ALL.iter().map(|o| o.name()).collect();
        format!("unknown operator {s}; expected one of {}", names.join(", "))
    })
}

fn parse_agg(s: &str) -> Result<AggAlgo, String> {
    match s {
        "hash" => Ok(AggAlgo::Hash),
        "sort" => Ok(AggAlgo::Sort),
        _ => Err(format!("unknown aggregation {s}; expected hash or sort")),
    }
}

fn parse_join(s: &str) -> Result<JoinAlgo, String> {
    match s {
        "hash" => Ok(JoinAlgo::Hash),
        "sort-merge" | "sort_merge" => Ok(JoinAlgo::SortMerge),
        _ => Err(format!("unknown join {s}; expected hash or sort-merge")),
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let machine = match &cli.config {
        Some(p) => MachineConfig::load(p)?,
        None => MachineConfig::desk(),
    };
    let ctx = Ctx { machine, seed: cli.seed, out: cli.out, format: cli.format };
    match cli.cmd {
        Cmd::Bench { op, dpus, tasklets, rows, param, width, reps, transfer, fixed_size } => commands::bench(
            &ctx,
            &BenchArgs {
                op,
                dpus: dpus.usizes(),
                tasklets: tasklets.usizes(),
                rows,
                param,
                width,
                reps,
                preset: transfer,
                fixed_size,
            },
        ),
        Cmd::Query { qid, sf, mode, agg, join, dpus, tasklets } => {
            commands::query(&ctx, &QueryArgs { qid, sf, preset: mode, agg, join, dpus, tasklets })
        }
        Cmd::Timeline { experiment, mode, dpus, rows, tasklets, sf } => {
            commands::timeline(&ctx, &TimelineArgs { experiment, preset: mode, dpus, rows, tasklets, sf })
        }
        Cmd::Sweep { kind, op, dpus, tasklets, rows, width, uniques, bits_per_pass, total_bits } => commands::sweep(
            &ctx,
            &SweepArgs {
                kind,
                op,
                dpus: dpus.map(|l| l.usizes()),
                tasklets: tasklets.map(|l| l.usizes()),
                rows,
                width,
                uniques: uniques.0,
                bits_per_pass: bits_per_pass.0,
                total_bits,
            },
        ),
        Cmd::Gen { sf } => commands::gen(&ctx, sf),
        Cmd::Calibrate { measure_only } => commands::calibrate(&ctx, measure_only),
    }
}

/// Configuration and input problems exit 2; anything else 1.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<SimError>() {
        Some(
            SimError::Config(_)
            | SimError::InvalidSize(_)
            | SimError::TaskletCount(_)
            | SimError::UnknownQuery(_)
            | SimError::MramExhausted { .. }
            | SimError::Format(_),
        ) => 2,
        Some(_) => 1,
        None if e.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
