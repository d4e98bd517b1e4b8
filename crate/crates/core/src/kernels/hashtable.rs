//! Linear-probing hash table laid out in a scratchpad word slice.
//!
//! Layout: word 0 holds the entry count, followed by `capacity` entries of
//! `1 + lanes` words (key, payload lanes). Empty slots hold [`EMPTY_KEY`].

use super::cost::Mix;
use super::hash::hash32;
use super::record::EMPTY_KEY;
use crate::error::{Result, SimError};
use crate::machine::InstrClass::*;

/// What `insert` does with a key that is already present.
pub enum OnDuplicate<'f> {
    /// Fold the new payload into the stored one.
    Combine(&'f dyn Fn(&mut [u64], &[u64])),
    /// Store another entry with the same key.
    Append,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Insert {
    Inserted(usize),
    Aggregated(usize),
    Full,
}

/// Cost of inspecting one slot while probing.
pub const PROBE_STEP: Mix = &[(WramLoad8, 1), (Cmp, 3), (Branch, 2), (Add32, 2), (Logic32, 1)];

pub struct SpmHashTable<'a> {
    words: &'a mut [u64],
    capacity: usize,
    lanes: usize,
    max_entries: usize,
}

impl<'a> SpmHashTable<'a> {
    /// Words needed for a table of `capacity` entries with `lanes` payload words.
    pub fn words_needed(capacity: usize, lanes: usize) -> usize {
        1 + capacity * (1 + lanes)
    }

    /// Largest power-of-two capacity fitting `words` words.
    pub fn capacity_for(words: usize, lanes: usize) -> usize {
        let fit = words.saturating_sub(1) / (1 + lanes);
        if fit == 0 {
            0
        } else {
            1 << fit.ilog2()
        }
    }

    /// Views `words` as a table. `fill_max` bounds the load factor.
    pub fn attach(words: &'a mut [u64], capacity: usize, lanes: usize, fill_max: f64) -> Result<Self> {
        if !capacity.is_power_of_two() {
            return Err(SimError::Config(format!("hash table capacity {capacity} is not a power of two")));
        }
        if words.len() < Self::words_needed(capacity, lanes) {
            return Err(SimError::ScratchpadExhausted {
                requested: Self::words_needed(capacity, lanes) as u64 * 8,
                available: words.len() as u64 * 8,
            });
        }
        let max_entries = ((capacity as f64 * fill_max).floor() as usize).clamp(1, capacity);
        Ok(SpmHashTable { words, capacity, lanes, max_entries })
    }

    /// Marks every slot empty.
    pub fn clear(&mut self) {
        self.words[0] = 0;
        let stride = 1 + self.lanes;
        for s in 0..self.capacity {
            self.words[1 + s * stride] = EMPTY_KEY as u64;
        }
    }

    pub fn len(&self) -> usize {
        self.words[0] as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn max_entries(&self) -> usize {
        self.max_entries
    }

    pub fn home(&self, key: i64) -> usize {
        hash32(key) as usize & (self.capacity - 1)
    }

    fn base(&self, slot: usize) -> usize {
        1 + slot * (1 + self.lanes)
    }

    pub fn key_at(&self, slot: usize) -> i64 {
        self.words[self.base(slot)] as i64
    }

    pub fn payload(&self, slot: usize) -> &[u64] {
        let b = self.base(slot) + 1;
        &self.words[b..b + self.lanes]
    }

    /// Inserts `key`. Returns the outcome and the number of slots inspected.
    pub fn insert(&mut self, key: i64, payload: &[u64], dup: OnDuplicate<'_>) -> (Insert, u64) {
        debug_assert_ne!(key, EMPTY_KEY, "the empty-slot sentinel cannot be inserted");
        debug_assert_eq!(payload.len(), self.lanes);
        let mask = self.capacity - 1;
        let mut slot = self.home(key);
        let mut probes = 0u64;
        while probes < self.capacity as u64 {
            probes += 1;
            let k = self.key_at(slot);
            if k == EMPTY_KEY {
                if self.len() >= self.max_entries {
                    return (Insert::Full, probes);
                }
                let b = self.base(slot);
                self.words[b] = key as u64;
                self.words[b + 1..b + 1 + self.lanes].copy_from_slice(payload);
                self.words[0] += 1;
                return (Insert::Inserted(slot), probes);
            }
            if k == key {
                if let OnDuplicate::Combine(f) = &dup {
                    let b = self.base(slot) + 1;
                    f(&mut self.words[b..b + self.lanes], payload);
                    return (Insert::Aggregated(slot), probes);
                }
            }
            slot = (slot + 1) & mask;
        }
        (Insert::Full, probes)
    }

    /// Looks `key` up. Returns the slot of the first match and the number of
    /// slots inspected. The probe stops at the first empty slot.
    pub fn probe(&self, key: i64) -> (Option<usize>, u64) {
        let mut found = None;
        let probes = self.probe_each(key, |s| {
            found = Some(s);
            false
        });
        (found, probes)
    }

    /// Calls `f` for every slot holding `key` until it returns false.
    /// Returns the number of slots inspected.
    pub fn probe_each(&self, key: i64, mut f: impl FnMut(usize) -> bool) -> u64 {
        let mask = self.capacity - 1;
        let mut slot = self.home(key);
        let mut probes = 0u64;
        while probes < self.capacity as u64 {
            probes += 1;
            let k = self.key_at(slot);
            if k == EMPTY_KEY {
                break;
            }
            if k == key && !f(slot) {
                break;
            }
            slot = (slot + 1) & mask;
        }
        probes
    }

    /// Occupied slots in slot order.
    pub fn occupied(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.capacity).filter(move |&s| self.key_at(s) != EMPTY_KEY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn sum(a: &mut [u64], b: &[u64]) {
        a[0] += b[0];
    }

    fn table(words: &mut Vec<u64>, cap: usize, fill: f64) -> SpmHashTable<'_> {
        words.resize(SpmHashTable::words_needed(cap, 1), 0);
        let mut t = SpmHashTable::attach(words, cap, 1, fill).unwrap();
        t.clear();
        t
    }

    #[test]
    fn insert_into_empty_lands_on_home_slot() {
        let mut w = Vec::new();
        let mut t = table(&mut w, 16, 0.5);
        let (r, probes) = t.insert(7, &[1], OnDuplicate::Append);
        assert_eq!(r, Insert::Inserted(t.home(7)));
        assert_eq!(probes, 1);
    }

    #[test]
    fn combine_sums_payloads() {
        let mut w = Vec::new();
        let mut t = table(&mut w, 16, 0.5);
        t.insert(7, &[1], OnDuplicate::Combine(&sum));
        let (r, _) = t.insert(7, &[2], OnDuplicate::Combine(&sum));
        assert!(matches!(r, Insert::Aggregated(_)));
        assert_eq!(t.len(), 1);
        let (s, _) = t.probe(7);
        assert_eq!(t.payload(s.unwrap()), &[3]);
    }

    #[test]
    fn full_table_rejects_new_keys() {
        let mut w = Vec::new();
        let mut t = table(&mut w, 8, 1.0);
        for k in 0..8 {
            assert!(matches!(t.insert(k, &[0], OnDuplicate::Combine(&sum)).0, Insert::Inserted(_)));
        }
        let (r, probes) = t.insert(100, &[0], OnDuplicate::Combine(&sum));
        assert_eq!(r, Insert::Full);
        assert_eq!(probes, 8);
        // existing keys still aggregate
        assert!(matches!(t.insert(3, &[1], OnDuplicate::Combine(&sum)).0, Insert::Aggregated(_)));
        // the load-factor cap applies before the table is physically full
        let mut w2 = Vec::new();
        let mut half = table(&mut w2, 8, 0.5);
        for k in 0..4 {
            half.insert(k, &[0], OnDuplicate::Append);
        }
        assert_eq!(half.insert(50, &[0], OnDuplicate::Append).0, Insert::Full);
    }

    #[test]
    fn probe_hits_and_misses() {
        let mut w = Vec::new();
        let mut t = table(&mut w, 64, 0.5);
        t.insert(42, &[9], OnDuplicate::Append);
        assert_eq!(t.payload(t.probe(42).0.unwrap()), &[9]);
        assert_eq!(t.probe(43).0, None);
    }

    #[test]
    fn append_keeps_duplicates() {
        let mut w = Vec::new();
        let mut t = table(&mut w, 16, 1.0);
        t.insert(5, &[1], OnDuplicate::Append);
        t.insert(5, &[2], OnDuplicate::Append);
        let mut seen = Vec::new();
        t.probe_each(5, |s| {
            seen.push(t.payload(s)[0]);
            true
        });
        seen.sort();
        assert_eq!(seen, vec![1, 2]);
    }

    proptest! {
        #[test]
        fn agrees_with_host_map(ops in proptest::collection::vec((-500i64..500, 0u64..100), 1..400)) {
            let mut w = Vec::new();
            let mut t = table(&mut w, 2048, 0.5);
            let mut oracle: HashMap<i64, u64> = HashMap::new();
            for &(k, v) in &ops {
                let (r, _) = t.insert(k, &[v], OnDuplicate::Combine(&sum));
                prop_assert!(r != Insert::Full);
                *oracle.entry(k).or_default() += v;
            }
            prop_assert_eq!(t.len(), oracle.len());
            for k in -600i64..600 {
                let got = t.probe(k).0.map(|s| t.payload(s)[0]);
                prop_assert_eq!(got, oracle.get(&k).copied());
            }
        }
    }
}
