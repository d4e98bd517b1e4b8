//! Cost model of a set of DPUs: memories, tasklet dispatch, DMA and
//! synchronization.

pub mod config;
pub mod dpu;
pub mod exec;
pub mod metrics;

pub use config::{InstrClass, InstrCostTable, MachineConfig};
pub use dpu::{Dpu, Mram, Wram, WramRegion};
pub use exec::{run_kernel, run_on_dpu, Kernel, LaunchInfo, Step, Tasklet, TaskletFuture};
pub use metrics::{KernelMetrics, TaskletMetrics};
