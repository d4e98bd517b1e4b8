//! Column-store tables, generated TPC-H-like data, physical plans for
//! queries 1, 3, 4, 5 and 6, and a host oracle to check them against.
//!
//! Monetary results keep their integer scale: prices carry two decimal
//! digits, so `price * (100 - discount)` carries four and Q1's charge six.

pub mod gen;
pub mod oracle;
pub mod plan;
pub mod table;

pub use gen::{generate, GenSpec, Tables};
pub use oracle::oracle_query;
pub use plan::{run_query, QueryOptions, QueryRun};
pub use table::{Column, ColumnTable, Lane};

use crate::error::{Result, SimError};
use crate::host::OpCounts;

/// The supported query ids.
pub const QUERIES: [u32; 5] = [1, 3, 4, 5, 6];

/// Rows kept by Q3.
pub const Q3_LIMIT: usize = 10;

/// Operator occurrences of each query. Aggregations count functions.
pub fn expected_ops(qid: u32) -> Result<OpCounts> {
    let (selection, aggregation, order, join) = match qid {
        1 => (1, 8, 0, 0),
        3 => (3, 1, 1, 2),
        4 => (2, 2, 0, 1),
        5 => (3, 1, 0, 5),
        6 => (3, 1, 0, 0),
        _ => return Err(SimError::UnknownQuery(qid)),
    };
    Ok(OpCounts { selection, aggregation, order, join })
}

/// Output columns of a query.
pub fn schema(qid: u32) -> Result<Vec<(&'static str, Lane)>> {
    use Lane::*;
    Ok(match qid {
        1 => vec![
            ("l_returnflag", Int32),
            ("l_linestatus", Int32),
            ("sum_qty", Decimal),
            ("sum_base_price", Decimal),
            ("sum_disc_price", Int64),
            ("sum_charge", Int64),
            ("avg_qty", Decimal),
            ("avg_price", Decimal),
            ("avg_disc", Decimal),
            ("count_order", Int64),
        ],
        3 => vec![("l_orderkey", Int32), ("revenue", Int64), ("o_orderdate", Date), ("o_shippriority", Int32)],
        4 => vec![("o_orderpriority", Int32), ("order_count", Int64)],
        5 => vec![("n_name", Int32), ("revenue", Int64)],
        6 => vec![("revenue", Int64)],
        _ => return Err(SimError::UnknownQuery(qid)),
    })
}

/// Sorts result rows into the order both the plans and the oracle report:
/// Q3 by revenue descending, then date, then order key, cut to
/// [`Q3_LIMIT`]; Q5 by revenue descending, then nation; the rest by all
/// columns.
pub fn canonical(qid: u32, mut rows: Vec<Vec<i64>>) -> Vec<Vec<i64>> {
    match qid {
        3 => {
            rows.sort_by_key(|r| (-r[1], r[2], r[0]));
            rows.truncate(Q3_LIMIT);
        }
        5 => rows.sort_by_key(|r| (-r[1], r[0])),
        _ => rows.sort(),
    }
    rows
}
