//! Instruction mixes charged by the kernels for recurring code sequences.
//! The counts approximate what a compiler emits for the 32-bit DPU ISA.

use crate::machine::{InstrClass::*, InstrClass, Tasklet};

pub type Mix = &'static [(InstrClass, u64)];

/// Compare two 64-bit keys and branch on the outcome.
pub const KEY_CMP: Mix = &[(Cmp, 2), (Branch, 1)];

/// One step of a scan over a scratchpad tile: load the key, compare it, test
/// the tile bound and advance the index and address.
pub const SCAN_STEP: Mix = &[(WramLoad8, 1), (Cmp, 3), (Branch, 2), (Add32, 3)];

/// Exchange one word between two scratchpad slots.
pub const SWAP_WORD: Mix = &[(WramLoad8, 2), (WramStore8, 2), (Add32, 1)];

/// Copy one word inside the scratchpad.
pub const COPY_WORD: Mix = &[(WramLoad8, 1), (WramStore8, 1), (Add32, 1)];

/// Address and size computation before a DMA request.
pub const DMA_SETUP: Mix = &[(Add32, 3), (Logic32, 1), (Cmp, 1), (Branch, 1)];

/// Loop bookkeeping per iteration.
pub const LOOP: Mix = &[(Add32, 1), (Cmp, 1), (Branch, 1)];

/// Read-modify-write of a 64-bit counter in the scratchpad.
pub const COUNTER_INC: Mix = &[(WramLoad8, 1), (Add64, 1), (WramStore8, 1), (Add32, 1)];

pub fn charge(t: &Tasklet<'_>, mix: Mix, times: u64) {
    if times == 0 {
        return;
    }
    for &(c, n) in mix {
        t.charge(c, n * times);
    }
}

/// Instructions in one execution of `mix` under the default cost table.
pub fn mix_len(mix: Mix) -> u64 {
    let table = crate::machine::InstrCostTable::default();
    mix.iter().map(|&(c, n)| table.cost(c) * n).sum()
}
