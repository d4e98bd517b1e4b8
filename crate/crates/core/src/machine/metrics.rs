use serde::Serialize;

use super::config::InstrClass;

/// Per-tasklet share of a kernel launch.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TaskletMetrics {
    pub instructions: u64,
    pub finish_cycle: u64,
    pub dma_wait_cycles: u64,
    pub sync_wait_cycles: u64,
}

/// Result of one kernel launch on one DPU.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct KernelMetrics {
    pub kernel: String,
    pub dpu: usize,
    pub tasklets: usize,
    pub instructions: u64,
    pub cycles: u64,
    pub ipc: f64,
    pub dma_read_bytes: u64,
    pub dma_write_bytes: u64,
    pub dma_jobs: u64,
    /// Issued instructions per class, indexed by [`InstrClass::index`].
    pub class_instructions: [u64; InstrClass::COUNT],
    pub per_tasklet: Vec<TaskletMetrics>,
}

impl KernelMetrics {
    pub fn class(&self, c: InstrClass) -> u64 {
        self.class_instructions[c.index()]
    }

    /// Adds a later launch on the same DPU, as if run back to back.
    pub fn absorb(&mut self, o: &KernelMetrics) {
        self.instructions += o.instructions;
        self.cycles += o.cycles;
        self.dma_read_bytes += o.dma_read_bytes;
        self.dma_write_bytes += o.dma_write_bytes;
        self.dma_jobs += o.dma_jobs;
        for (a, b) in self.class_instructions.iter_mut().zip(o.class_instructions) {
            *a += b;
        }
        self.tasklets = self.tasklets.max(o.tasklets);
        self.ipc = if self.cycles == 0 { 0.0 } else { self.instructions as f64 / self.cycles as f64 };
    }
}

/// Metrics summed per DPU over a sequence of launches.
pub fn combine_per_dpu(launches: &[Vec<KernelMetrics>]) -> Vec<KernelMetrics> {
    let mut out: Vec<KernelMetrics> = Vec::new();
    for launch in launches {
        for m in launch {
            match out.iter_mut().find(|x| x.dpu == m.dpu) {
                Some(x) => x.absorb(m),
                None => {
                    let mut first = m.clone();
                    first.per_tasklet.clear();
                    out.push(first);
                }
            }
        }
    }
    out.sort_by_key(|m| m.dpu);
    out
}

/// Worst-case cycles over DPUs.
pub fn worst_cycles(ms: &[KernelMetrics]) -> u64 {
    ms.iter().map(|m| m.cycles).max().unwrap_or(0)
}

pub fn total_instructions(ms: &[KernelMetrics]) -> u64 {
    ms.iter().map(|m| m.instructions).sum()
}

pub fn total_class(ms: &[KernelMetrics], c: InstrClass) -> u64 {
    ms.iter().map(|m| m.class(c)).sum()
}

pub fn total_dma_bytes(ms: &[KernelMetrics]) -> u64 {
    ms.iter().map(|m| m.dma_read_bytes + m.dma_write_bytes).sum()
}
