//! Building blocks executed on a single DPU with explicit scratchpad
//! tiling: prefix sums, sorting, merging, hashing, hash tables and
//! partitioning.

pub mod config;
pub mod cost;
pub mod hash;
pub mod hashtable;
pub mod merge;
pub mod partition;
pub mod prefix;
pub mod record;
pub mod sort;

pub use config::KernelConfig;
pub use hash::{hash32, HashBits};
pub use hashtable::{Insert, OnDuplicate, SpmHashTable};
pub use merge::{merge_pass, mergesort_mram};
pub use partition::{
    hash_partition_count, hash_partition_scatter, multipass_radix_partition, radix_partition_below, BucketCounts,
    RadixOutput,
};
pub use prefix::exclusive_prefix_sum;
pub use record::{KeyValue, EMPTY_KEY};
pub use sort::{partition_parallel, quicksort_mram, MramArray, PartitionOutput, SortKernel, SortMode};
