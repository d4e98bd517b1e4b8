use crate::error::Result;
use crate::kernels::cost::{self, COUNTER_INC};
use crate::machine::{InstrClass, Tasklet, WramRegion};

/// Contiguous share `[lo, hi)` of `n` items for tasklet `id` of `tn`.
pub(crate) fn share(n: usize, tn: usize, id: usize) -> (usize, usize) {
    (n * id / tn, n * (id + 1) / tn)
}

/// Passes a running offset from tasklet to tasklet in id order. Returns
/// the sum of the counts of all lower tasklets; the last tasklet leaves
/// the total in `slot`.
pub(crate) async fn chain_offset(t: Tasklet<'_>, slot: WramRegion, cnt: u64) -> Result<u64> {
    let (id, tn) = (t.id(), t.count());
    let off = if id == 0 {
        t.charge(InstrClass::Add32, 1);
        0
    } else {
        t.wait_for(id - 1).await?;
        t.ld(slot, 0)
    };
    t.st(slot, 0, off + cnt);
    cost::charge(&t, COUNTER_INC, 1);
    if id + 1 < tn {
        t.notify().await?;
    }
    Ok(off)
}

/// Instruction mix accumulated per class, charged in bulk.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct ClassCounts(pub [u64; InstrClass::COUNT]);

impl ClassCounts {
    pub fn add(&mut self, c: InstrClass, n: u64) {
        self.0[c.index()] += n;
    }

    pub fn add_mix(&mut self, mix: &[(InstrClass, u64)], times: u64) {
        for &(c, n) in mix {
            self.add(c, n * times);
        }
    }

    pub fn charge(&self, t: &Tasklet<'_>, times: u64) {
        if times == 0 {
            return;
        }
        for c in InstrClass::ALL {
            let n = self.0[c.index()];
            if n > 0 {
                t.charge(c, n * times);
            }
        }
    }
}
