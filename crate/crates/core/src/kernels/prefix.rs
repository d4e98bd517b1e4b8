use super::cost::{self, Mix};
use crate::machine::{InstrClass::*, Tasklet};

/// Exclusive prefix sum: `offsets[0] = 0`, `offsets[i] = offsets[i-1] + counts[i-1]`.
/// Returns the offsets and the total.
pub fn exclusive_prefix_sum(counts: &[u64]) -> (Vec<u64>, u64) {
    let mut acc = 0u64;
    let offsets = counts
        .iter()
        .map(|&c| {
            let o = acc;
            acc += c;
            o
        })
        .collect();
    (offsets, acc)
}

/// Per-entry cost of a prefix sum over scratchpad counters.
pub const PREFIX_STEP: Mix = &[(WramLoad8, 1), (Add64, 1), (WramStore8, 1), (Add32, 1), (Cmp, 1), (Branch, 1)];

pub fn charge_prefix(t: &Tasklet<'_>, entries: usize) {
    cost::charge(t, PREFIX_STEP, entries as u64);
}
