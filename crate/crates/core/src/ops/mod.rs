//! Database operators over the simulated DPUs: selection, sort and hash
//! aggregation, ordering, sort-merge and radix hash joins.
//!
//! Relations live in bank memory as row-major records of 64-bit words, at
//! the same address on every DPU ([`DistTable`]). Operators allocate their
//! outputs from the session heap and leave them resident so the next
//! operator can consume them without a host round trip.

mod common;
pub mod aggregate;
pub mod expr;
pub mod join;
pub mod map;
pub mod order;
pub mod select;
pub mod table;

pub use aggregate::{aggregate_hash, aggregate_sort, collect_groups, AggFn, AggSpec};
pub use expr::{CmpOp, Expr, Operand, Pred};
pub use join::{index_pairs, join_hash, join_sort_merge, JoinIndexPair};
pub use map::{map, project};
pub use order::{order_global, order_topk};
pub use select::select;
pub use table::{fetch_rows, load_columns, load_rows, peek_rows, DistTable, OperatorResult};

use serde::{Deserialize, Serialize};

/// Which aggregation operator a plan uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggAlgo {
    Sort,
    #[default]
    Hash,
}

/// Which join operator a plan uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JoinAlgo {
    SortMerge,
    #[default]
    Hash,
}
