//! Value parsers shared by the subcommands.

use clap::ValueEnum;
use pimsim::host::{SchedMode, SessionOptions, TransferMode};

/// Output encoding. Metrics take csv or json, timelines json or csv,
/// tables csv or bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Bin,
}

/// Transfer optimization level, from none to everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Parallel whole-buffer transfers with a host reorder, synchronous.
    Naive,
    /// Scatter/gather straight into destination buffers, synchronous.
    ScatterGather,
    /// Scatter/gather with pooled buffers, synchronous.
    Pooled,
    /// Pooled scatter/gather with ranks scheduled independently.
    #[value(alias = "optimized")]
    Async,
}

impl Preset {
    pub fn session(self) -> SessionOptions {
        let (transfer, sched) = match self {
            Preset::Naive => (TransferMode::Naive, SchedMode::Sync),
            Preset::ScatterGather => (TransferMode::Scatter, SchedMode::Sync),
            Preset::Pooled => (TransferMode::ScatterPooled, SchedMode::Sync),
            Preset::Async => (TransferMode::ScatterPooled, SchedMode::Async),
        };
        SessionOptions { transfer, sched, ..SessionOptions::default() }
    }
}

/// Parses `a..b` (inclusive), `2^a..2^b` (powers of two) and comma
/// separated mixes of those and single values.
pub fn parse_list(s: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (pa, pb) = (a.strip_prefix("2^"), b.strip_prefix("2^"));
                let (lo, hi, pow) = match (pa, pb) {
                    (Some(a), Some(b)) => (num(a)?, num(b)?, true),
                    (None, None) => (num(a)?, num(b)?, false),
                    _ => return Err(format!("range {part} mixes powers and plain values")),
                };
                if lo > hi {
                    return Err(format!("empty range {part}"));
                }
                if pow && hi > 62 {
                    return Err(format!("exponent {hi} too large"));
                }
                out.extend((lo..=hi).map(|v| if pow { 1u64 << v } else { v }));
            }
            None => match part.strip_prefix("2^") {
                Some(e) => {
                    let e = num(e)?;
                    if e > 62 {
                        return Err(format!("exponent {e} too large"));
                    }
                    out.push(1 << e);
                }
                None => out.push(num(part)?),
            },
        }
    }
    if out.is_empty() {
        return Err("empty list".into());
    }
    Ok(out)
}

fn num(s: &str) -> Result<u64, String> {
    s.trim().parse().map_err(|_| format!("not a number: {s}"))
}

/// clap adapter for [`parse_list`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct List(pub Vec<u64>);

impl std::str::FromStr for List {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        parse_list(s).map(List)
    }
}

impl List {
    pub fn usizes(&self) -> Vec<usize> {
        self.0.iter().map(|&v| v as usize).collect()
    }
}
