//! Bandwidth probes for the cost model and a fit of clock and DMA slope
//! to measured hardware figures.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::machine::{run_on_dpu, Dpu, InstrClass, Kernel, LaunchInfo, MachineConfig, Tasklet, TaskletFuture, Wram, WramRegion};

/// Hardware bandwidths (MB/s) the fit aims at.
pub const TARGET_MRAM_READ: f64 = 628.0;
pub const TARGET_MRAM_WRITE: f64 = 633.0;
pub const TARGET_WRAM: f64 = 2818.0;

const DMA_BYTES: u64 = 2048;
const REPS: usize = 64;
const WRAM_WORDS: u64 = 1 << 14;
const WRAM_TASKLETS: usize = 16;

#[derive(Debug)]
struct DmaProbe {
    bytes: u64,
    write: bool,
    buf: WramRegion,
}

impl Kernel for DmaProbe {
    fn name(&self) -> &'static str {
        "calibrate_dma"
    }

    fn setup(&mut self, wram: &mut Wram, _: LaunchInfo) -> Result<()> {
        self.buf = wram.alloc(self.bytes, 8)?;
        Ok(())
    }

    fn tasklet<'a>(&'a self, t: Tasklet<'a>) -> TaskletFuture<'a> {
        Box::pin(async move {
            for i in 0..REPS as u64 {
                if self.write {
                    t.mram_write(self.buf.offset, i * self.bytes, self.bytes).await?;
                } else {
                    t.mram_read(i * self.bytes, self.buf.offset, self.bytes).await?;
                }
            }
            Ok(())
        })
    }
}

/// Each tasklet streams its share of a word array through the pipeline.
struct WramProbe;

impl Kernel for WramProbe {
    fn name(&self) -> &'static str {
        "calibrate_wram"
    }

    fn tasklet<'a>(&'a self, t: Tasklet<'a>) -> TaskletFuture<'a> {
        Box::pin(async move {
            t.charge(InstrClass::WramLoad8, WRAM_WORDS / t.count() as u64);
            Ok(())
        })
    }
}

/// Single-tasklet bandwidth of back-to-back `bytes`-byte DMA transfers.
pub fn mram_bandwidth_mbps(m: &MachineConfig, bytes: u64, write: bool) -> Result<f64> {
    let mut d = Dpu::new(0, (bytes * REPS as u64).max(8), m.wram_bytes);
    let (_, k) = run_on_dpu(m, &mut d, 1, DmaProbe { bytes, write, buf: WramRegion::default() })?;
    Ok((bytes * REPS as u64) as f64 / m.cycles_to_seconds(k.cycles) / 1e6)
}

/// Scratchpad bandwidth of 8-byte loads with a full pipeline.
pub fn wram_bandwidth_mbps(m: &MachineConfig) -> Result<f64> {
    let mut d = Dpu::new(0, 8, m.wram_bytes);
    let (_, k) = run_on_dpu(m, &mut d, WRAM_TASKLETS.min(m.max_tasklets), WramProbe)?;
    Ok((WRAM_WORDS * 8) as f64 / m.cycles_to_seconds(k.cycles) / 1e6)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub machine: MachineConfig,
    pub mram_read_mbps: f64,
    pub mram_write_mbps: f64,
    pub wram_mbps: f64,
}

impl Calibration {
    /// Worst relative error against the targets.
    pub fn max_error(&self) -> f64 {
        [
            (self.mram_read_mbps, TARGET_MRAM_READ),
            (self.mram_write_mbps, TARGET_MRAM_WRITE),
            (self.wram_mbps, TARGET_WRAM),
        ]
        .iter()
        .map(|(got, want)| (got / want - 1.0).abs())
        .fold(0.0, f64::max)
    }
}

/// Measures the three bandwidths under `m`.
pub fn calibrate(m: &MachineConfig) -> Result<Calibration> {
    Ok(Calibration {
        machine: m.clone(),
        mram_read_mbps: mram_bandwidth_mbps(m, DMA_BYTES, false)?,
        mram_write_mbps: mram_bandwidth_mbps(m, DMA_BYTES, true)?,
        wram_mbps: wram_bandwidth_mbps(m)?,
    })
}

/// Picks the clock from the scratchpad target (one 8-byte load per cycle
/// at full pipeline) and then the DMA slope so a 2 KiB transfer hits the
/// mean of the read and write targets, keeping the fixed DMA latency.
pub fn fit_machine(base: &MachineConfig) -> Result<Calibration> {
    let mut m = base.clone();
    let per_cycle = wram_bandwidth_mbps(base)? * 1e6 / base.clock_hz;
    m.clock_hz = TARGET_WRAM * 1e6 / per_cycle;
    let target = (TARGET_MRAM_READ + TARGET_MRAM_WRITE) / 2.0 * 1e6;
    let cycles = DMA_BYTES as f64 * m.clock_hz / target;
    m.dma_alpha = ((cycles - m.dma_beta as f64) / DMA_BYTES as f64).max(0.01);
    m.validate()?;
    calibrate(&m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_within_ten_percent() {
        let c = calibrate(&MachineConfig::desk()).unwrap();
        assert!(c.max_error() < 0.10, "{c:?}");
    }

    #[test]
    fn fit_recovers_targets_from_a_bad_start() {
        let bad = MachineConfig { clock_hz: 500e6, dma_alpha: 2.0, ..MachineConfig::desk() };
        assert!(calibrate(&bad).unwrap().max_error() > 0.3);
        let c = fit_machine(&bad).unwrap();
        assert!(c.max_error() < 0.02, "{c:?}");
        assert_eq!(c.machine.dma_beta, bad.dma_beta);
    }

    #[test]
    fn small_transfers_are_far_less_efficient() {
        let m = MachineConfig::desk();
        let big = mram_bandwidth_mbps(&m, 2048, false).unwrap();
        let small = mram_bandwidth_mbps(&m, 8, false).unwrap();
        assert!(big >= 5.0 * small, "{big} vs {small}");
    }
}
