//! Simulated hardware parameters and their TOML representation.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::host::HostCostModel;

/// Instruction classes the kernels charge against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrClass {
    Add32,
    Add64,
    /// Shifts, xor, and, or on a 32-bit lane.
    Logic32,
    Mul32,
    Mul64,
    Div32,
    Cmp,
    Branch,
    WramLoad8,
    WramStore8,
    /// Issuing a DMA request.
    Dma,
    /// Mutex, handshake and barrier operations.
    Sync,
}

impl InstrClass {
    pub const ALL: [InstrClass; 12] = [
        InstrClass::Add32,
        InstrClass::Add64,
        InstrClass::Logic32,
        InstrClass::Mul32,
        InstrClass::Mul64,
        InstrClass::Div32,
        InstrClass::Cmp,
        InstrClass::Branch,
        InstrClass::WramLoad8,
        InstrClass::WramStore8,
        InstrClass::Dma,
        InstrClass::Sync,
    ];
    pub const COUNT: usize = 12;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            InstrClass::Add32 => "add32",
            InstrClass::Add64 => "add64",
            InstrClass::Logic32 => "logic32",
            InstrClass::Mul32 => "mul32",
            InstrClass::Mul64 => "mul64",
            InstrClass::Div32 => "div32",
            InstrClass::Cmp => "cmp",
            InstrClass::Branch => "branch",
            InstrClass::WramLoad8 => "wram_load8",
            InstrClass::WramStore8 => "wram_store8",
            InstrClass::Dma => "dma",
            InstrClass::Sync => "sync",
        }
    }
}

/// Number of issued instructions per charged operation of each class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstrCostTable {
    pub add32: u64,
    /// Compiled to two 32-bit additions.
    pub add64: u64,
    pub logic32: u64,
    /// Software shift-add emulation, operand-independent worst case.
    pub mul32: u64,
    pub mul64: u64,
    pub div32: u64,
    pub cmp: u64,
    pub branch: u64,
    pub wram_load8: u64,
    pub wram_store8: u64,
    pub dma: u64,
    pub sync: u64,
}

impl Default for InstrCostTable {
    fn default() -> Self {
        InstrCostTable {
            add32: 1,
            add64: 2,
            logic32: 1,
            mul32: 32,
            mul64: 96,
            div32: 64,
            cmp: 1,
            branch: 1,
            wram_load8: 1,
            wram_store8: 1,
            dma: 1,
            sync: 1,
        }
    }
}

impl InstrCostTable {
    pub fn cost(&self, class: InstrClass) -> u64 {
        match class {
            InstrClass::Add32 => self.add32,
            InstrClass::Add64 => self.add64,
            InstrClass::Logic32 => self.logic32,
            InstrClass::Mul32 => self.mul32,
            InstrClass::Mul64 => self.mul64,
            InstrClass::Div32 => self.div32,
            InstrClass::Cmp => self.cmp,
            InstrClass::Branch => self.branch,
            InstrClass::WramLoad8 => self.wram_load8,
            InstrClass::WramStore8 => self.wram_store8,
            InstrClass::Dma => self.dma,
            InstrClass::Sync => self.sync,
        }
    }

    /// Dense lookup array indexed by [`InstrClass::index`].
    pub fn to_array(&self) -> [u64; InstrClass::COUNT] {
        let mut out = [0; InstrClass::COUNT];
        for c in InstrClass::ALL {
            out[c.index()] = self.cost(c);
        }
        out
    }
}

/// Full description of the simulated machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineConfig {
    /// Number of simulated DPUs.
    pub dpu_count: usize,
    /// DPUs per rank; transfers and async scheduling work per rank.
    pub dpus_per_rank: usize,
    /// DPU clock in Hz.
    pub clock_hz: f64,
    /// Bank memory per DPU in bytes.
    pub mram_bytes: u64,
    /// Scratchpad per DPU in bytes.
    pub wram_bytes: u64,
    /// Minimum cycles between two instructions of one tasklet.
    pub dispatch_gap: u64,
    /// DMA cost slope in cycles per byte.
    pub dma_alpha: f64,
    /// Fixed DMA cost in cycles.
    pub dma_beta: u64,
    /// Upper bound on tasklets per launch.
    pub max_tasklets: usize,
    /// Scratchpad bytes reserved for each tasklet's stack.
    pub stack_reserve: u64,
    pub instr_cost: InstrCostTable,
    pub host: HostCostModel,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig::desk()
    }
}

impl MachineConfig {
    /// 32 DPUs in 8 ranks of 4. Small enough to simulate quickly while
    /// keeping several ranks for the transfer scheduler.
    pub fn desk() -> Self {
        MachineConfig {
            dpu_count: 32,
            dpus_per_rank: 4,
            clock_hz: 350e6,
            mram_bytes: 64 << 20,
            wram_bytes: 64 << 10,
            dispatch_gap: 11,
            dma_alpha: 0.52,
            dma_beta: 77,
            max_tasklets: 24,
            stack_reserve: 2048,
            instr_cost: InstrCostTable::default(),
            host: HostCostModel::default(),
        }
    }

    /// 2048 DPUs in 32 ranks of 64.
    pub fn full_scale() -> Self {
        MachineConfig { dpu_count: 2048, dpus_per_rank: 64, ..MachineConfig::desk() }
    }

    /// Desk profile resized to `n` DPUs. The rank size is the largest of
    /// 4, 2, 1 that divides `n`.
    pub fn with_dpus(&self, n: usize) -> Self {
        let per_rank = [4usize, 2, 1].into_iter().find(|r| n % r == 0).unwrap_or(1);
        let per_rank = if self.dpus_per_rank > 4 && n % self.dpus_per_rank == 0 {
            self.dpus_per_rank
        } else {
            per_rank
        };
        MachineConfig { dpu_count: n, dpus_per_rank: per_rank, ..self.clone() }
    }

    pub fn rank_count(&self) -> usize {
        self.dpu_count / self.dpus_per_rank
    }

    pub fn rank_of(&self, dpu: usize) -> usize {
        dpu / self.dpus_per_rank
    }

    pub fn cycles_to_seconds(&self, cycles: u64) -> f64 {
        cycles as f64 / self.clock_hz
    }

    /// Duration of one DMA job of `bytes` bytes.
    pub fn dma_cycles(&self, bytes: u64) -> u64 {
        self.dma_beta + (self.dma_alpha * bytes as f64).ceil() as u64
    }

    /// Scratchpad bytes left for kernel buffers with `tasklets` stacks.
    pub fn wram_budget(&self, tasklets: usize) -> u64 {
        self.wram_bytes.saturating_sub(self.stack_reserve * tasklets as u64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.dpu_count == 0 {
            return bad("dpu_count must be positive".into());
        }
        if self.dpus_per_rank == 0 || self.dpu_count % self.dpus_per_rank != 0 {
            return bad(format!(
                "dpu_count {} is not a multiple of dpus_per_rank {}",
                self.dpu_count, self.dpus_per_rank
            ));
        }
        if self.mram_bytes == 0 || self.mram_bytes % 8 != 0 {
            return bad(format!("mram_bytes {} must be a positive multiple of 8", self.mram_bytes));
        }
        if self.wram_bytes == 0 || self.wram_bytes % 8 != 0 {
            return bad(format!("wram_bytes {} must be a positive multiple of 8", self.wram_bytes));
        }
        if self.dispatch_gap == 0 {
            return bad("dispatch_gap must be at least 1".into());
        }
        if !(self.dma_alpha > 0.0 && self.dma_alpha.is_finite()) {
            return bad(format!("dma_alpha {} must be positive", self.dma_alpha));
        }
        if !(self.clock_hz > 0.0 && self.clock_hz.is_finite()) {
            return bad("clock_hz must be positive".into());
        }
        if self.max_tasklets == 0 {
            return bad("max_tasklets must be positive".into());
        }
        if self.stack_reserve % 8 != 0 {
            return bad("stack_reserve must be a multiple of 8".into());
        }
        self.host.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: MachineConfig = toml::from_str(s).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("machine config always serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}
