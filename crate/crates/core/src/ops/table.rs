use serde::Serialize;

use super::map::pack_columns;
use crate::error::{Result, SimError};
use crate::host::{Session, Timeline};
use crate::kernels::MramArray;
use crate::machine::metrics::combine_per_dpu;
use crate::machine::KernelMetrics;

/// A relation spread over all DPUs of a session: DPU `d` holds `rows[d]`
/// records of `cols.len()` words at `addr`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistTable {
    pub cols: Vec<String>,
    pub addr: u64,
    /// Records reserved per DPU.
    pub cap: usize,
    pub rows: Vec<usize>,
}

impl DistTable {
    pub fn w(&self) -> usize {
        self.cols.len()
    }

    pub fn total_rows(&self) -> usize {
        self.rows.iter().sum()
    }

    pub fn max_rows(&self) -> usize {
        self.rows.iter().copied().max().unwrap_or(0)
    }

    pub fn array(&self, dpu: usize) -> MramArray {
        MramArray::new(self.addr, self.rows[dpu], self.w())
    }

    pub fn col(&self, name: &str) -> Result<usize> {
        self.cols
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| SimError::Config(format!("no column {name} in ({})", self.cols.join(", "))))
    }

    /// Same records under new column names.
    pub fn renamed(&self, cols: &[&str]) -> Result<DistTable> {
        if cols.len() != self.w() {
            return Err(SimError::Config(format!("{} names for {} columns", cols.len(), self.w())));
        }
        Ok(DistTable { cols: cols.iter().map(|c| c.to_string()).collect(), ..self.clone() })
    }
}

/// Rows `[lo, hi)` of `n` that DPU `d` of `dpus` receives.
pub fn block_range(n: usize, dpus: usize, d: usize) -> (usize, usize) {
    (n * d / dpus, n * (d + 1) / dpus)
}

/// Loads columns to the DPUs, block-distributing rows, and packs them into
/// records on the DPUs.
pub fn load_columns(s: &mut Session, names: &[&str], cols: &[Vec<i64>]) -> Result<DistTable> {
    if names.len() != cols.len() || cols.is_empty() {
        return Err(SimError::Config(format!("{} names for {} columns", names.len(), cols.len())));
    }
    let n = cols[0].len();
    if cols.iter().any(|c| c.len() != n) {
        return Err(SimError::InvalidSize("columns differ in length".into()));
    }
    let d = s.dpu_count();
    let rows: Vec<usize> = (0..d).map(|i| block_range(n, d, i)).map(|(lo, hi)| hi - lo).collect();
    let cap = rows.iter().copied().max().unwrap_or(0);
    let w = cols.len();
    let addr = s.alloc(cap * w)?;
    let mark = s.heap_mark();
    let mut col_addrs = Vec::with_capacity(w);
    for c in cols {
        let a = s.alloc(cap)?;
        let parts: Vec<Vec<u64>> = (0..d)
            .map(|i| {
                let (lo, hi) = block_range(n, d, i);
                c[lo..hi].iter().map(|&v| v as u64).collect()
            })
            .collect();
        s.load_per_dpu(a, &parts)?;
        col_addrs.push(a);
    }
    let table = DistTable { cols: names.iter().map(|c| c.to_string()).collect(), addr, cap, rows };
    pack_columns(s, &col_addrs, &table)?;
    s.heap_release(mark);
    Ok(table)
}

/// Loads row-major records as they are: `per_dpu[d]` goes to DPU `d`.
pub fn load_rows(s: &mut Session, names: &[&str], per_dpu: &[Vec<u64>]) -> Result<DistTable> {
    let w = names.len();
    if per_dpu.len() != s.dpu_count() || w == 0 || per_dpu.iter().any(|v| v.len() % w != 0) {
        return Err(SimError::InvalidSize("records do not match the table shape".into()));
    }
    let rows: Vec<usize> = per_dpu.iter().map(|v| v.len() / w).collect();
    let cap = rows.iter().copied().max().unwrap_or(0);
    let addr = s.alloc(cap * w)?;
    s.load_per_dpu(addr, per_dpu)?;
    Ok(DistTable { cols: names.iter().map(|c| c.to_string()).collect(), addr, cap, rows })
}

fn split_rows(words: &[u64], w: usize) -> impl Iterator<Item = Vec<i64>> + '_ {
    words.chunks_exact(w).map(|r| r.iter().map(|&v| v as i64).collect())
}

/// Copies all records to the host, DPU by DPU.
pub fn fetch_rows(s: &mut Session, t: &DistTable) -> Result<Vec<Vec<i64>>> {
    let lens: Vec<usize> = t.rows.iter().map(|r| r * t.w()).collect();
    let parts = s.read_per_dpu(t.addr, &lens)?;
    Ok(parts.iter().flat_map(|p| split_rows(p, t.w())).collect())
}

/// All records per DPU without recording a transfer; for checks.
pub fn peek_rows(s: &Session, t: &DistTable) -> Result<Vec<Vec<Vec<i64>>>> {
    (0..s.dpu_count())
        .map(|d| Ok(split_rows(&s.peek(d, t.addr, t.rows[d] * t.w())?, t.w()).collect()))
        .collect()
}

/// Output of a stand-alone operator run.
#[derive(Debug, Clone, Serialize)]
pub struct OperatorResult {
    pub rows: Vec<Vec<i64>>,
    /// Per-DPU totals over every launch of the run.
    pub metrics: Vec<KernelMetrics>,
    pub timeline: Timeline,
}

impl OperatorResult {
    pub fn from_session(s: &Session, rows: Vec<Vec<i64>>) -> Result<Self> {
        let launches: Vec<Vec<KernelMetrics>> = s.launches.iter().map(|l| l.metrics.clone()).collect();
        Ok(OperatorResult { rows, metrics: combine_per_dpu(&launches), timeline: s.timeline()? })
    }
}
