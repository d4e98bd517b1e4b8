//! Selection: tasklets filter tiles and hand the output offset along a
//! notify/wait chain in tile order, so every DPU keeps its row order.

use super::common::ClassCounts;
use super::expr::Pred;
use super::table::DistTable;
use crate::error::{Result, SimError};
use crate::host::Session;
use crate::kernels::cost::{self, COPY_WORD, COUNTER_INC, DMA_SETUP, LOOP};
use crate::kernels::{KernelConfig, MramArray};
use crate::machine::{run_on_dpu, Kernel, LaunchInfo, MachineConfig, Tasklet, TaskletFuture, Wram, WramRegion};

pub struct SelectKernel {
    src: MramArray,
    out: u64,
    preds: Vec<Pred>,
    machine: MachineConfig,
    kcfg: KernelConfig,
    m: usize,
    tiles: Vec<WramRegion>,
    slot: WramRegion,
    pub selected: usize,
}

impl SelectKernel {
    pub fn new(machine: &MachineConfig, kcfg: &KernelConfig, src: MramArray, out: u64, preds: Vec<Pred>) -> Self {
        SelectKernel {
            src,
            out,
            preds,
            machine: machine.clone(),
            kcfg: kcfg.clone(),
            m: 0,
            tiles: Vec::new(),
            slot: WramRegion::default(),
            selected: 0,
        }
    }

    /// Filters tile `i` in place, takes the output offset from the owner of
    /// the previous tile and passes it on.
    async fn tile(&self, t: &Tasklet<'_>, i: usize, tile: WramRegion) -> Result<()> {
        let tn = t.count();
        let (w, m, n) = (self.src.w, self.m, self.src.len);
        let nt = n.div_ceil(m);
        let lo = i * m;
        let len = m.min(n - lo);
        cost::charge(t, DMA_SETUP, 1);
        t.load(self.src.rec_addr(lo), tile, 0, len * w).await?;
        let mut mix = ClassCounts::default();
        let kept = t.wram(|wr| {
            let words = wr.slice_mut(tile);
            let mut k = 0;
            for r in 0..len {
                let rec = &words[r * w..(r + 1) * w];
                let mut pass = true;
                for p in &self.preds {
                    p.mix(&mut mix);
                    if !p.eval(rec) {
                        pass = false;
                        break;
                    }
                }
                if pass {
                    if k != r {
                        words.copy_within(r * w..(r + 1) * w, k * w);
                        mix.add_mix(COPY_WORD, w as u64);
                    }
                    k += 1;
                }
            }
            k
        });
        mix.add_mix(LOOP, len as u64);
        mix.charge(t, 1);
        // Offsets travel from the owner of tile i - 1 to the owner of tile i.
        if tn > 1 && i > 0 {
            t.wait_for((i - 1) % tn).await?;
        }
        let off = if i == 0 { 0 } else { t.ld(self.slot, 0) as usize };
        t.st(self.slot, 0, (off + kept) as u64);
        cost::charge(t, COUNTER_INC, 1);
        if tn > 1 && i + 1 < nt {
            t.notify().await?;
        }
        if kept > 0 {
            cost::charge(t, DMA_SETUP, 1);
            t.store(tile, 0, kept * w, self.out + (off * w * 8) as u64).await?;
        }
        Ok(())
    }

    async fn run(&self, t: Tasklet<'_>) -> Result<()> {
        let (id, tn) = (t.id(), t.count());
        let (m, n) = (self.m, self.src.len);
        let tile = self.tiles[id];
        let nt = n.div_ceil(m);
        for i in (id..nt).step_by(tn) {
            self.tile(&t, i, tile).await?;
        }
        Ok(())
    }
}

impl Kernel for SelectKernel {
    fn name(&self) -> &'static str {
        "select"
    }

    fn setup(&mut self, wram: &mut Wram, info: LaunchInfo) -> Result<()> {
        self.m = self.kcfg.tile_elems(&self.machine, 1, self.src.w, 8, 1)?;
        self.slot = wram.alloc_words(1)?;
        for _ in 0..info.tasklets {
            self.tiles.push(wram.alloc_words(self.m * self.src.w)?);
        }
        Ok(())
    }

    fn tasklet<'a>(&'a self, t: Tasklet<'a>) -> TaskletFuture<'a> {
        Box::pin(self.run(t))
    }

    fn finish(&mut self, wram: &Wram) -> Result<()> {
        self.selected = if self.src.len == 0 { 0 } else { wram.get(self.slot, 0) as usize };
        Ok(())
    }
}

/// Rows of `t` satisfying every predicate, in their original order on
/// each DPU.
pub fn select(s: &mut Session, t: &DistTable, preds: &[Pred]) -> Result<DistTable> {
    if let Some(p) = preds.iter().find(|p| p.max_col() >= t.w()) {
        return Err(SimError::Config(format!("predicate {p:?} reads beyond width {}", t.w())));
    }
    s.ops.selection += 1;
    let addr = s.alloc(t.cap * t.w())?;
    let (m, k) = (s.machine.clone(), s.opts.kernel.clone());
    let tn = s.tasklets();
    let rows = s.per_dpu(|d, dpu| {
        let kern = SelectKernel::new(&m, &k, t.array(d), addr, preds.to_vec());
        let (kern, met) = run_on_dpu(&m, dpu, tn, kern)?;
        Ok((kern.selected, vec![met]))
    })?;
    Ok(DistTable { cols: t.cols.clone(), addr, cap: t.cap, rows })
}
