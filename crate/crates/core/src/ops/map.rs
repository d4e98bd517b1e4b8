//! Record-at-a-time kernels: packing columns into records and computing
//! new records from expressions.

use super::common::ClassCounts;
use super::expr::Expr;
use super::table::DistTable;
use crate::error::{Result, SimError};
use crate::host::Session;
use crate::kernels::cost::{COPY_WORD, DMA_SETUP, LOOP};
use crate::kernels::{KernelConfig, MramArray};
use crate::machine::{Kernel, LaunchInfo, MachineConfig, Tasklet, TaskletFuture, Wram, WramRegion};

/// Interleaves `cols.len()` column arrays of `n` words into records.
pub struct PackKernel {
    cols: Vec<u64>,
    out: MramArray,
    machine: MachineConfig,
    kcfg: KernelConfig,
    m: usize,
    col_tiles: Vec<WramRegion>,
    rec_tiles: Vec<WramRegion>,
}

impl PackKernel {
    pub fn new(machine: &MachineConfig, kcfg: &KernelConfig, cols: Vec<u64>, out: MramArray) -> Self {
        PackKernel {
            cols,
            out,
            machine: machine.clone(),
            kcfg: kcfg.clone(),
            m: 0,
            col_tiles: Vec::new(),
            rec_tiles: Vec::new(),
        }
    }

    async fn run(&self, t: Tasklet<'_>) -> Result<()> {
        let (w, m, n) = (self.out.w, self.m, self.out.len);
        let (ct, rt) = (self.col_tiles[t.id()], self.rec_tiles[t.id()]);
        let tiles = n.div_ceil(m);
        for i in (t.id()..tiles).step_by(t.count()) {
            let lo = i * m;
            let len = m.min(n - lo);
            for (c, &addr) in self.cols.iter().enumerate() {
                crate::kernels::cost::charge(&t, DMA_SETUP, 1);
                t.load(addr + lo as u64 * 8, ct, c * m, len).await?;
            }
            t.wram(|wr| {
                for c in 0..w {
                    for r in 0..len {
                        let v = wr.get(ct, c * m + r);
                        wr.set(rt, r * w + c, v);
                    }
                }
            });
            crate::kernels::cost::charge(&t, COPY_WORD, (len * w) as u64);
            crate::kernels::cost::charge(&t, LOOP, len as u64);
            crate::kernels::cost::charge(&t, DMA_SETUP, 1);
            t.store(rt, 0, len * w, self.out.rec_addr(lo)).await?;
        }
        Ok(())
    }
}

impl Kernel for PackKernel {
    fn name(&self) -> &'static str {
        "pack"
    }

    fn setup(&mut self, wram: &mut Wram, info: LaunchInfo) -> Result<()> {
        let w = self.out.w;
        self.m = self.kcfg.tile_elems(&self.machine, 2, w, 0, 1)?;
        for _ in 0..info.tasklets {
            self.col_tiles.push(wram.alloc_words(self.m * w)?);
            self.rec_tiles.push(wram.alloc_words(self.m * w)?);
        }
        Ok(())
    }

    fn tasklet<'a>(&'a self, t: Tasklet<'a>) -> TaskletFuture<'a> {
        Box::pin(self.run(t))
    }
}

/// Packs the column arrays at `cols` (same address on every DPU) into the
/// records of `table`.
pub(crate) fn pack_columns(s: &mut Session, cols: &[u64], table: &DistTable) -> Result<()> {
    let (m, k) = (s.machine.clone(), s.opts.kernel.clone());
    let t = s.tasklets();
    s.per_dpu(|d, dpu| {
        let kern = PackKernel::new(&m, &k, cols.to_vec(), table.array(d));
        let (_, met) = crate::machine::run_on_dpu(&m, dpu, t, kern)?;
        Ok(((), vec![met]))
    })?;
    Ok(())
}

/// Writes one record of `exprs.len()` words per input record.
pub struct MapKernel {
    src: MramArray,
    out: MramArray,
    exprs: Vec<Expr>,
    mix: ClassCounts,
    machine: MachineConfig,
    kcfg: KernelConfig,
    m: usize,
    in_tiles: Vec<WramRegion>,
    out_tiles: Vec<WramRegion>,
}

impl MapKernel {
    pub fn new(machine: &MachineConfig, kcfg: &KernelConfig, src: MramArray, out: u64, exprs: Vec<Expr>) -> Self {
        let mut mix = ClassCounts::default();
        for e in &exprs {
            e.mix(&mut mix);
            mix.add(crate::machine::InstrClass::WramStore8, 1);
        }
        mix.add_mix(LOOP, 1);
        MapKernel {
            out: MramArray::new(out, src.len, exprs.len()),
            src,
            exprs,
            mix,
            machine: machine.clone(),
            kcfg: kcfg.clone(),
            m: 0,
            in_tiles: Vec::new(),
            out_tiles: Vec::new(),
        }
    }

    async fn run(&self, t: Tasklet<'_>) -> Result<()> {
        let (wi, wo, m, n) = (self.src.w, self.out.w, self.m, self.src.len);
        let (it, ot) = (self.in_tiles[t.id()], self.out_tiles[t.id()]);
        for i in (t.id()..n.div_ceil(m)).step_by(t.count()) {
            let lo = i * m;
            let len = m.min(n - lo);
            crate::kernels::cost::charge(&t, DMA_SETUP, 1);
            t.load(self.src.rec_addr(lo), it, 0, len * wi).await?;
            t.wram(|wr| {
                for r in 0..len {
                    let rec: Vec<u64> = wr.slice(it)[r * wi..(r + 1) * wi].to_vec();
                    for (c, e) in self.exprs.iter().enumerate() {
                        wr.set(ot, r * wo + c, e.eval(&rec) as u64);
                    }
                }
            });
            self.mix.charge(&t, len as u64);
            crate::kernels::cost::charge(&t, DMA_SETUP, 1);
            t.store(ot, 0, len * wo, self.out.rec_addr(lo)).await?;
        }
        Ok(())
    }
}

impl Kernel for MapKernel {
    fn name(&self) -> &'static str {
        "map"
    }

    fn setup(&mut self, wram: &mut Wram, info: LaunchInfo) -> Result<()> {
        let (wi, wo) = (self.src.w, self.out.w);
        self.m = self.kcfg.tile_elems(&self.machine, 1, wi + wo, 0, 1)?;
        for _ in 0..info.tasklets {
            self.in_tiles.push(wram.alloc_words(self.m * wi)?);
            self.out_tiles.push(wram.alloc_words(self.m * wo)?);
        }
        Ok(())
    }

    fn tasklet<'a>(&'a self, t: Tasklet<'a>) -> TaskletFuture<'a> {
        Box::pin(self.run(t))
    }
}

/// New table whose columns are `exprs` evaluated over every record of `t`.
pub fn map(s: &mut Session, t: &DistTable, exprs: &[(&str, Expr)]) -> Result<DistTable> {
    if exprs.is_empty() {
        return Err(SimError::Config("map needs at least one output column".into()));
    }
    if let Some(c) = exprs.iter().filter_map(|(_, e)| e.max_col()).max() {
        if c >= t.w() {
            return Err(SimError::Config(format!("column {c} out of range for width {}", t.w())));
        }
    }
    let wo = exprs.len();
    let addr = s.alloc(t.cap * wo)?;
    let (m, k) = (s.machine.clone(), s.opts.kernel.clone());
    let tn = s.tasklets();
    let ex: Vec<Expr> = exprs.iter().map(|(_, e)| e.clone()).collect();
    s.per_dpu(|d, dpu| {
        let kern = MapKernel::new(&m, &k, t.array(d), addr, ex.clone());
        let (_, met) = crate::machine::run_on_dpu(&m, dpu, tn, kern)?;
        Ok(((), vec![met]))
    })?;
    Ok(DistTable { cols: exprs.iter().map(|(n, _)| n.to_string()).collect(), addr, cap: t.cap, rows: t.rows.clone() })
}

/// Keeps the listed columns, in the given order.
pub fn project(s: &mut Session, t: &DistTable, cols: &[&str]) -> Result<DistTable> {
    let exprs: Vec<(&str, Expr)> = cols.iter().map(|c| Ok((*c, Expr::col(t.col(c)?)))).collect::<Result<_>>()?;
    map(s, t, &exprs)
}
