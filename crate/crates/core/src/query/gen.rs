//! Deterministic TPC-H-like data at desk scale.
//!
//! Only the columns the five queries read are generated. Strings become
//! dictionary codes (see [`codes`]), money is [`Lane::Decimal`] and dates
//! are [`Lane::Date`].
//!
//! Distributions:
//! - keys are dense, starting at 1; foreign keys are uniform over the
//!   referenced table, so every one resolves;
//! - order dates are uniform over 1992-01-01 ..= 1998-08-02;
//! - ship date = order date + 1..=121, commit date = order date + 30..=90,
//!   receipt date = ship date + 1..=30;
//! - quantity 1..=50, part price 900.00..=2000.00, extended price =
//!   quantity × part price, discount 0.00..=0.10, tax 0.00..=0.08;
//! - return flag R or A (even odds) when received by 1995-06-17, N after;
//!   line status O when shipped after 1995-06-17, F otherwise.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::table::{ColumnTable, Lane};
use crate::error::{Result, SimError};

/// Dictionary codes for string-valued attributes.
pub mod codes {
    pub const RETURNFLAG: [&str; 3] = ["A", "N", "R"];
    pub const LINESTATUS: [&str; 2] = ["F", "O"];
    pub const SEGMENTS: [&str; 5] = ["AUTOMOBILE", "BUILDING", "FURNITURE", "HOUSEHOLD", "MACHINERY"];
    pub const PRIORITIES: [&str; 5] = ["1-URGENT", "2-HIGH", "3-MEDIUM", "4-NOT SPECIFIED", "5-LOW"];
    pub const REGIONS: [&str; 5] = ["AFRICA", "AMERICA", "ASIA", "EUROPE", "MIDDLE EAST"];
    /// Nation name and region key, indexed by nation key.
    pub const NATIONS: [(&str, i64); 25] = [
        ("ALGERIA", 0),
        ("ARGENTINA", 1),
        ("BRAZIL", 1),
        ("CANADA", 1),
        ("EGYPT", 4),
        ("ETHIOPIA", 0),
        ("FRANCE", 3),
        ("GERMANY", 3),
        ("INDIA", 2),
        ("INDONESIA", 2),
        ("IRAN", 4),
        ("IRAQ", 4),
        ("JAPAN", 2),
        ("JORDAN", 4),
        ("KENYA", 0),
        ("MOROCCO", 0),
        ("MOZAMBIQUE", 0),
        ("PERU", 1),
        ("CHINA", 2),
        ("ROMANIA", 3),
        ("SAUDI ARABIA", 4),
        ("VIETNAM", 2),
        ("RUSSIA", 3),
        ("UNITED KINGDOM", 3),
        ("UNITED STATES", 1),
    ];

    pub const FLAG_A: i64 = 0;
    pub const FLAG_N: i64 = 1;
    pub const FLAG_R: i64 = 2;
    pub const STATUS_F: i64 = 0;
    pub const STATUS_O: i64 = 1;
    pub const BUILDING: i64 = 1;
    pub const ASIA: i64 = 2;
}

/// Days since 1970-01-01 of a calendar date.
pub fn day(y: i32, m: u32, d: u32) -> i64 {
    let epoch = chrono::NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch");
    chrono::NaiveDate::from_ymd_opt(y, m, d).expect("valid date").signed_duration_since(epoch).num_days()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub sf: f64,
    pub seed: u64,
}

impl GenSpec {
    pub fn new(sf: f64, seed: u64) -> Self {
        GenSpec { sf, seed }
    }

    fn rows(&self, per_sf: f64) -> usize {
        (per_sf * self.sf).round() as usize
    }

    pub fn lineitem_rows(&self) -> usize {
        self.rows(6e6)
    }

    pub fn orders_rows(&self) -> usize {
        self.rows(1.5e6).max(1)
    }

    pub fn customer_rows(&self) -> usize {
        self.rows(1.5e5).max(1)
    }

    pub fn supplier_rows(&self) -> usize {
        self.rows(1e4).max(1)
    }
}

/// Generated tables by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tables(pub BTreeMap<String, ColumnTable>);

impl Tables {
    pub fn get(&self, name: &str) -> Result<&ColumnTable> {
        self.0.get(name).ok_or_else(|| SimError::Config(format!("no table {name}")))
    }

    pub fn insert(&mut self, t: ColumnTable) {
        self.0.insert(t.name.clone(), t);
    }

    /// The same schemas with zero rows.
    pub fn emptied(&self) -> Tables {
        let mut e = self.clone();
        for t in e.0.values_mut() {
            for c in &mut t.columns {
                c.data.clear();
            }
        }
        e
    }
}

/// Independent stream per table so that tables do not shift when another
/// table's size changes.
fn stream(seed: u64, table: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(table);
    r
}

pub fn generate(spec: &GenSpec) -> Result<Tables> {
    if !(spec.sf > 0.0 && spec.sf.is_finite()) {
        return Err(SimError::Config(format!("scale factor {} must be positive", spec.sf)));
    }
    use codes::*;
    let (n_c, n_s, n_o, n_l) = (spec.customer_rows(), spec.supplier_rows(), spec.orders_rows(), spec.lineitem_rows());
    let mut tables = Tables(BTreeMap::new());

    tables.insert(
        ColumnTable::new("region")
            .with("r_regionkey", Lane::Int32, (0..5).collect())?
            .with("r_name", Lane::Int32, (0..5).collect())?,
    );
    tables.insert(
        ColumnTable::new("nation")
            .with("n_nationkey", Lane::Int32, (0..25).collect())?
            .with("n_name", Lane::Int32, (0..25).collect())?
            .with("n_regionkey", Lane::Int32, NATIONS.iter().map(|n| n.1).collect())?,
    );

    let mut r = stream(spec.seed, 1);
    let c_nat: Vec<i64> = (0..n_c).map(|_| r.gen_range(0..25)).collect();
    let c_seg: Vec<i64> = (0..n_c).map(|_| r.gen_range(0..SEGMENTS.len() as i64)).collect();
    tables.insert(
        ColumnTable::new("customer")
            .with("c_custkey", Lane::Int32, (1..=n_c as i64).collect())?
            .with("c_nationkey", Lane::Int32, c_nat)?
            .with("c_mktsegment", Lane::Int32, c_seg)?,
    );

    let mut r = stream(spec.seed, 2);
    let s_nat: Vec<i64> = (0..n_s).map(|_| r.gen_range(0..25)).collect();
    tables.insert(
        ColumnTable::new("supplier")
            .with("s_suppkey", Lane::Int32, (1..=n_s as i64).collect())?
            .with("s_nationkey", Lane::Int32, s_nat)?,
    );

    let mut r = stream(spec.seed, 3);
    let (first, last) = (day(1992, 1, 1), day(1998, 8, 2));
    let o_date: Vec<i64> = (0..n_o).map(|_| r.gen_range(first..=last)).collect();
    let o_cust: Vec<i64> = (0..n_o).map(|_| r.gen_range(1..=n_c as i64)).collect();
    let o_prio: Vec<i64> = (0..n_o).map(|_| r.gen_range(0..PRIORITIES.len() as i64)).collect();
    tables.insert(
        ColumnTable::new("orders")
            .with("o_orderkey", Lane::Int32, (1..=n_o as i64).collect())?
            .with("o_custkey", Lane::Int32, o_cust)?
            .with("o_orderdate", Lane::Date, o_date.clone())?
            .with("o_orderpriority", Lane::Int32, o_prio)?
            .with("o_shippriority", Lane::Int32, vec![0; n_o])?,
    );

    let mut r = stream(spec.seed, 4);
    let cutoff = day(1995, 6, 17);
    let mut cols: [Vec<i64>; 11] = Default::default();
    for _ in 0..n_l {
        let o = r.gen_range(0..n_o);
        let qty = r.gen_range(1..=50i64);
        let part_price = r.gen_range(90_000..=200_000i64);
        let ship = o_date[o] + r.gen_range(1..=121);
        let commit = o_date[o] + r.gen_range(30..=90);
        let receipt = ship + r.gen_range(1..=30);
        let flag = if receipt <= cutoff { if r.gen_bool(0.5) { FLAG_R } else { FLAG_A } } else { FLAG_N };
        let status = if ship > cutoff { STATUS_O } else { STATUS_F };
        let row = [
            o as i64 + 1,
            r.gen_range(1..=n_s as i64),
            qty * 100,
            qty * part_price,
            r.gen_range(0..=10),
            r.gen_range(0..=8),
            flag,
            status,
            ship,
            commit,
            receipt,
        ];
        for (c, v) in cols.iter_mut().zip(row) {
            c.push(v);
        }
    }
    let [ok, sk, qty, price, disc, tax, flag, status, ship, commit, receipt] = cols;
    tables.insert(
        ColumnTable::new("lineitem")
            .with("l_orderkey", Lane::Int32, ok)?
            .with("l_suppkey", Lane::Int32, sk)?
            .with("l_quantity", Lane::Decimal, qty)?
            .with("l_extendedprice", Lane::Decimal, price)?
            .with("l_discount", Lane::Decimal, disc)?
            .with("l_tax", Lane::Decimal, tax)?
            .with("l_returnflag", Lane::Int32, flag)?
            .with("l_linestatus", Lane::Int32, status)?
            .with("l_shipdate", Lane::Date, ship)?
            .with("l_commitdate", Lane::Date, commit)?
            .with("l_receiptdate", Lane::Date, receipt)?,
    );
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_counts_follow_scale() {
        let t = generate(&GenSpec::new(0.01, 1)).unwrap();
        assert_eq!(t.get("lineitem").unwrap().row_count(), 60_000);
        assert_eq!(t.get("orders").unwrap().row_count(), 15_000);
        assert_eq!(t.get("customer").unwrap().row_count(), 1_500);
        assert_eq!(t.get("supplier").unwrap().row_count(), 100);
        assert_eq!(t.get("nation").unwrap().row_count(), 25);
        assert_eq!(t.get("region").unwrap().row_count(), 5);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&GenSpec::new(0.01, 7)).unwrap();
        assert_eq!(a, generate(&GenSpec::new(0.01, 7)).unwrap());
        assert_ne!(a, generate(&GenSpec::new(0.01, 8)).unwrap());
    }

    #[test]
    fn foreign_keys_resolve() {
        let t = generate(&GenSpec::new(0.01, 3)).unwrap();
        let n_o = t.get("orders").unwrap().row_count() as i64;
        let n_s = t.get("supplier").unwrap().row_count() as i64;
        let n_c = t.get("customer").unwrap().row_count() as i64;
        let l = t.get("lineitem").unwrap();
        assert!(l.col("l_orderkey").unwrap().iter().all(|&k| (1..=n_o).contains(&k)));
        assert!(l.col("l_suppkey").unwrap().iter().all(|&k| (1..=n_s).contains(&k)));
        assert!(t.get("orders").unwrap().col("o_custkey").unwrap().iter().all(|&k| (1..=n_c).contains(&k)));
    }

    #[test]
    fn q6_style_predicate_is_selective() {
        let t = generate(&GenSpec::new(0.01, 3)).unwrap();
        let l = t.get("lineitem").unwrap();
        let (ship, disc, qty) =
            (l.col("l_shipdate").unwrap(), l.col("l_discount").unwrap(), l.col("l_quantity").unwrap());
        let hits = (0..l.row_count())
            .filter(|&i| {
                (day(1994, 1, 1)..day(1995, 1, 1)).contains(&ship[i])
                    && (5..=7).contains(&disc[i])
                    && qty[i] < 2400
            })
            .count();
        assert!(hits > 0 && hits < l.row_count());
    }

    #[test]
    fn rejects_bad_scale() {
        assert!(generate(&GenSpec::new(0.0, 1)).is_err());
        assert!(generate(&GenSpec::new(f64::NAN, 1)).is_err());
    }
}
