//! Record layouts shared by kernels. Records are sequences of 64-bit words
//! whose first word is the signed sort/hash key.

/// Reserved key marking an empty hash table slot. Generators never emit it.
pub const EMPTY_KEY: i64 = i64::MIN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct KeyValue {
    pub key: i64,
    /// Row index of the record the key came from.
    pub value: u64,
}

impl KeyValue {
    pub const WORDS: usize = 2;

    pub fn new(key: i64, value: u64) -> Self {
        KeyValue { key, value }
    }
}

pub fn kv_to_words(recs: &[KeyValue]) -> Vec<u64> {
    let mut out = Vec::with_capacity(recs.len() * 2);
    for r in recs {
        out.push(r.key as u64);
        out.push(r.value);
    }
    out
}

pub fn kv_from_words(words: &[u64]) -> Vec<KeyValue> {
    words.chunks_exact(2).map(|c| KeyValue { key: c[0] as i64, value: c[1] }).collect()
}

/// Key of record `i` in a packed array of `w`-word records.
#[inline]
pub fn key_at(words: &[u64], w: usize, i: usize) -> i64 {
    words[i * w] as i64
}

/// Sorts packed records by key on the host. Used by oracles and tests.
pub fn host_sort_records(words: &[u64], w: usize) -> Vec<u64> {
    let mut recs: Vec<&[u64]> = words.chunks_exact(w).collect();
    recs.sort_by_key(|r| r[0] as i64);
    recs.concat()
}

/// Records as a sorted multiset, for order-insensitive comparisons.
pub fn record_multiset(words: &[u64], w: usize) -> Vec<Vec<u64>> {
    let mut recs: Vec<Vec<u64>> = words.chunks_exact(w).map(|c| c.to_vec()).collect();
    recs.sort();
    recs
}
