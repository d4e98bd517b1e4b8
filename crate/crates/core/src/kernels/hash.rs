//! Shift/add/xor hash for 64-bit keys.
//!
//! The key is folded to 32 bits (low word xor high word), then mixed by six
//! steps, alternating additive and xor steps:
//!
//! | step | operation                           |
//! |------|-------------------------------------|
//! | 1    | `h = (h + 0x7ed55d16) + (h << 12)`  |
//! | 2    | `h = (h ^ 0xc761c23c) ^ (h >> 19)`  |
//! | 3    | `h = (h + 0x165667b1) + (h << 5)`   |
//! | 4    | `h = (h + 0xd3a2646c) ^ (h << 9)`   |
//! | 5    | `h = (h + 0xfd7046c5) + (h << 3)`   |
//! | 6    | `h = (h ^ 0xb55a4f09) ^ (h >> 16)`  |
//!
//! Both the low and the high bits come out evenly spread, so bucket fields
//! can be taken from either end. No multiplication or division is
//! involved; the function costs [`HASH32_INSTRUCTIONS`] native instructions.

use super::cost::Mix;
use crate::machine::InstrClass::*;

#[inline]
pub fn hash32(key: i64) -> u32 {
    let k = key as u64;
    let mut h = (k as u32) ^ ((k >> 32) as u32);
    h = h.wrapping_add(0x7ed5_5d16).wrapping_add(h << 12);
    h = (h ^ 0xc761_c23c) ^ (h >> 19);
    h = h.wrapping_add(0x1656_67b1).wrapping_add(h << 5);
    h = h.wrapping_add(0xd3a2_646c) ^ (h << 9);
    h = h.wrapping_add(0xfd70_46c5).wrapping_add(h << 3);
    (h ^ 0xb55a_4f09) ^ (h >> 16)
}

/// Instruction mix of one [`hash32`] call: the fold xor, seven additions
/// and eleven shift/xor operations.
pub const HASH32_COST: Mix = &[(Logic32, 12), (Add32, 7)];
pub const HASH32_INSTRUCTIONS: u64 = 19;

/// Bucket selected by a bit field of the hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashBits {
    pub shift: u32,
    pub bits: u32,
}

impl HashBits {
    /// The low `bits` bits, as used for table slots and single-pass buckets.
    pub fn low(bits: u32) -> Self {
        HashBits { shift: 0, bits }
    }

    /// Bits `[32 - skip - bits, 32 - skip)`, counting from the top.
    pub fn top(skip: u32, bits: u32) -> Self {
        HashBits { shift: 32 - skip - bits, bits }
    }

    pub fn buckets(&self) -> usize {
        1 << self.bits
    }

    #[inline]
    pub fn bucket_of_hash(&self, h: u32) -> usize {
        if self.bits == 0 {
            0
        } else {
            ((h >> self.shift) & ((1u32 << self.bits) - 1)) as usize
        }
    }

    #[inline]
    pub fn bucket(&self, key: i64) -> usize {
        self.bucket_of_hash(hash32(key))
    }
}

/// Shift and mask applied to a hash to extract a bucket.
pub const BUCKET_EXTRACT: Mix = &[(Logic32, 2)];
