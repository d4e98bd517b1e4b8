//! Physical plans. Each query loads the columns it needs, chains
//! operators over DPU-resident intermediates and finishes on the host.

use serde::{Deserialize, Serialize};

use super::gen::{codes, day, Tables};
use super::table::ColumnTable;
use super::{canonical, schema, Q3_LIMIT};
use crate::error::{Result, SimError};
use crate::host::{LaunchRecord, OpCounts, Session, SessionOptions, Timeline};
use crate::machine::{InstrClass, MachineConfig};
use crate::ops::aggregate::{collect_groups, AggFn, AggSpec};
use crate::ops::map::{map, project};
use crate::ops::{
    aggregate_hash, aggregate_sort, join_hash, join_sort_merge, load_columns, order_topk, select, AggAlgo, CmpOp,
    DistTable, Expr, JoinAlgo, Pred,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryOptions {
    pub agg: AggAlgo,
    pub join: JoinAlgo,
    pub session: SessionOptions,
}

/// Result and cost record of one query run.
#[derive(Debug, Clone)]
pub struct QueryRun {
    pub result: ColumnTable,
    pub ops: OpCounts,
    pub launches: Vec<LaunchRecord>,
    pub timeline: Timeline,
}

impl QueryRun {
    /// Instructions of class `c` over every launch and DPU.
    pub fn class_total(&self, c: InstrClass) -> u64 {
        self.launches.iter().flat_map(|l| &l.metrics).map(|m| m.class(c)).sum()
    }

    /// Sum over launches of the slowest DPU's cycles.
    pub fn kernel_cycles(&self) -> u64 {
        self.launches.iter().map(|l| l.metrics.iter().map(|m| m.cycles).max().unwrap_or(0)).sum()
    }
}

struct Plan<'a> {
    s: Session,
    t: &'a Tables,
    opts: QueryOptions,
}

fn c(i: usize) -> Expr {
    Expr::col(i)
}

fn k(v: i64) -> Expr {
    Expr::Const(v)
}

impl Plan<'_> {
    fn load(&mut self, table: &str, cols: &[&str]) -> Result<DistTable> {
        let t = self.t.get(table)?;
        load_columns(&mut self.s, cols, &t.cols(cols)?)
    }

    fn select(&mut self, t: &DistTable, preds: &[Pred]) -> Result<DistTable> {
        select(&mut self.s, t, preds)
    }

    fn map(&mut self, t: &DistTable, exprs: &[(&str, Expr)]) -> Result<DistTable> {
        map(&mut self.s, t, exprs)
    }

    fn join(&mut self, inner: &DistTable, outer: &DistTable) -> Result<DistTable> {
        match self.opts.join {
            JoinAlgo::SortMerge => join_sort_merge(&mut self.s, inner, outer),
            JoinAlgo::Hash => join_hash(&mut self.s, inner, outer),
        }
    }

    /// Aggregates and combines the per-DPU partials on the host.
    fn aggregate(&mut self, t: &DistTable, spec: &AggSpec) -> Result<Vec<(i64, Vec<i64>)>> {
        let p = self.agg_resident(t, spec)?;
        let groups = collect_groups(&mut self.s, &p)?;
        Ok(groups.into_iter().map(|(key, lanes)| (key, spec.finalize(&lanes))).collect())
    }

    /// Aggregates and leaves the per-DPU groups in bank memory.
    fn agg_resident(&mut self, t: &DistTable, spec: &AggSpec) -> Result<DistTable> {
        match self.opts.agg {
            AggAlgo::Sort => aggregate_sort(&mut self.s, t, spec),
            AggAlgo::Hash => aggregate_hash(&mut self.s, t, spec),
        }
    }

    fn q1(&mut self) -> Result<Vec<Vec<i64>>> {
        let cols = ["l_returnflag", "l_linestatus", "l_quantity", "l_extendedprice", "l_discount", "l_tax", "l_shipdate"];
        let l = self.load("lineitem", &cols)?;
        let l = self.select(&l, &[Pred::cmp(6, CmpOp::Le, day(1998, 9, 2))])?;
        let disc_price = Expr::mul(c(3), Expr::sub(k(100), c(4)));
        let m = self.map(
            &l,
            &[
                ("flag_status", Expr::or(Expr::shl(c(0), 1), c(1))),
                ("qty", c(2)),
                ("price", c(3)),
                ("disc_price", disc_price.clone()),
                ("charge", Expr::mul(disc_price, Expr::add(k(100), c(5)))),
                ("disc", c(4)),
            ],
        )?;
        use AggFn::*;
        let spec = AggSpec::new(vec![Sum(1), Sum(2), Sum(3), Sum(4), Avg(1), Avg(2), Avg(5), Count]);
        Ok(self
            .aggregate(&m, &spec)?
            .into_iter()
            .map(|(key, v)| [vec![key >> 1, key & 1], v].concat())
            .collect())
    }

    fn q3(&mut self) -> Result<Vec<Vec<i64>>> {
        let cut = day(1995, 3, 15);
        // The group key packs order key, date and ship priority.
        let o = self.t.get("orders")?;
        if o.col("o_orderdate")?.iter().any(|&d| !(0..1 << 15).contains(&d))
            || o.col("o_shippriority")?.iter().any(|&p| !(0..=1).contains(&p))
        {
            return Err(SimError::Config("q3 packs dates into 15 bits and ship priority into 1".into()));
        }
        let cust = self.load("customer", &["c_custkey", "c_mktsegment"])?;
        let cust = self.select(&cust, &[Pred::cmp(1, CmpOp::Eq, codes::BUILDING)])?;
        let cust = project(&mut self.s, &cust, &["c_custkey"])?;
        let ord = self.load("orders", &["o_custkey", "o_orderkey", "o_orderdate", "o_shippriority"])?;
        let ord = self.select(&ord, &[Pred::cmp(2, CmpOp::Lt, cut)])?;
        let co = self.join(&cust, &ord)?;
        let packed = Expr::or(Expr::or(Expr::shl(c(1), 16), Expr::shl(c(2), 1)), c(3));
        let ok = self.map(&co, &[("o_orderkey", c(1)), ("packed", packed)])?;
        let li = self.load("lineitem", &["l_orderkey", "l_extendedprice", "l_discount", "l_shipdate"])?;
        let li = self.select(&li, &[Pred::cmp(3, CmpOp::Gt, cut)])?;
        let j = self.join(&ok, &li)?;
        let r = self.map(&j, &[("packed", c(4)), ("rev", Expr::mul(c(1), Expr::sub(k(100), c(2))))])?;
        // Joined rows sit on the DPU owning their order key, so the
        // per-DPU groups are complete and can be ordered in place.
        let a = self.agg_resident(&r, &AggSpec::new(vec![AggFn::Sum(1)]))?;
        let date = Expr::and(Expr::shr(c(0), 1), 0x7fff);
        let keyed = self.map(&a, &[("order", Expr::add(Expr::sub(k(0), Expr::shl(c(1), 15)), date)), ("packed", c(0)), ("rev", c(1))])?;
        let top = order_topk(&mut self.s, &keyed, Q3_LIMIT)?;
        Ok(top.into_iter().map(|r| vec![r[1] >> 16, r[2], (r[1] >> 1) & 0x7fff, r[1] & 1]).collect())
    }

    fn q4(&mut self) -> Result<Vec<Vec<i64>>> {
        let ord = self.load("orders", &["o_orderkey", "o_orderdate", "o_orderpriority"])?;
        let ord = self.select(&ord, &[Pred::between(1, day(1993, 7, 1), day(1993, 10, 1) - 1)])?;
        let li = self.load("lineitem", &["l_orderkey", "l_commitdate", "l_receiptdate"])?;
        let li = self.select(&li, &[Pred::cols(1, CmpOp::Lt, 2)])?;
        let j = self.join(&ord, &li)?;
        // One row per qualifying order: distinct (order key, priority).
        let u = self.map(&j, &[("order_prio", Expr::or(Expr::shl(c(0), 3), c(4)))])?;
        let u = self.agg_resident(&u, &AggSpec::new(vec![AggFn::Unique]))?;
        let p = self.map(&u, &[("prio", Expr::and(c(0), 7))])?;
        Ok(self.aggregate(&p, &AggSpec::new(vec![AggFn::Count]))?.into_iter().map(|(k, v)| vec![k, v[0]]).collect())
    }

    fn q5(&mut self) -> Result<Vec<Vec<i64>>> {
        let (lo, hi) = (day(1994, 1, 1), day(1995, 1, 1));
        let reg = self.load("region", &["r_regionkey", "r_name"])?;
        let reg = self.select(&reg, &[Pred::cmp(1, CmpOp::Eq, codes::ASIA)])?;
        let reg = project(&mut self.s, &reg, &["r_regionkey"])?;
        let nat = self.load("nation", &["n_regionkey", "n_nationkey", "n_name"])?;
        let nr = self.join(&reg, &nat)?;
        let nations = self.map(&nr, &[("n_nationkey", c(1)), ("n_name", c(2))])?;
        let ord = self.load("orders", &["o_custkey", "o_orderkey", "o_orderdate"])?;
        let ord = self.select(&ord, &[Pred::between(2, lo, hi - 1)])?;
        let cust = self.load("customer", &["c_custkey", "c_nationkey"])?;
        let co = self.join(&cust, &ord)?;
        let co = self.map(&co, &[("o_orderkey", c(1)), ("c_nationkey", c(3))])?;
        let li = self.load("lineitem", &["l_orderkey", "l_suppkey", "l_extendedprice", "l_discount"])?;
        let ol = self.join(&co, &li)?;
        let rev = Expr::mul(c(2), Expr::sub(k(100), c(3)));
        let ol = self.map(&ol, &[("l_suppkey", c(1)), ("rev", rev), ("c_nationkey", c(4))])?;
        let sup = self.load("supplier", &["s_suppkey", "s_nationkey"])?;
        let ls = self.join(&sup, &ol)?;
        let ls = self.select(&ls, &[Pred::cols(2, CmpOp::Eq, 3)])?;
        let ls = self.map(&ls, &[("nation", c(3)), ("rev", c(1))])?;
        let named = self.join(&nations, &ls)?;
        let named = self.map(&named, &[("n_name", c(2)), ("rev", c(1))])?;
        Ok(self
            .aggregate(&named, &AggSpec::new(vec![AggFn::Sum(1)]))?
            .into_iter()
            .map(|(k, v)| vec![k, v[0]])
            .collect())
    }

    fn q6(&mut self) -> Result<Vec<Vec<i64>>> {
        let (lo, hi) = (day(1994, 1, 1), day(1995, 1, 1));
        let li = self.load("lineitem", &["l_shipdate", "l_discount", "l_quantity", "l_extendedprice"])?;
        let li = self.select(&li, &[Pred::between(0, lo, hi - 1)])?;
        let li = self.select(&li, &[Pred::between(1, 5, 7)])?;
        let li = self.select(&li, &[Pred::cmp(2, CmpOp::Lt, 2400)])?;
        let m = self.map(&li, &[("all", k(0)), ("rev", Expr::mul(c(3), c(1)))])?;
        Ok(self.aggregate(&m, &AggSpec::new(vec![AggFn::Sum(1)]))?.into_iter().map(|(_, v)| v).collect())
    }
}

/// Runs query `qid` end to end on a fresh session over `machine`.
pub fn run_query(qid: u32, tables: &Tables, machine: &MachineConfig, opts: &QueryOptions) -> Result<QueryRun> {
    let schema = schema(qid)?;
    let s = Session::new(machine, opts.session.clone())?;
    let mut p = Plan { s, t: tables, opts: opts.clone() };
    let rows = match qid {
        1 => p.q1()?,
        3 => p.q3()?,
        4 => p.q4()?,
        5 => p.q5()?,
        6 => p.q6()?,
        _ => return Err(SimError::UnknownQuery(qid)),
    };
    p.s.host_sync();
    let result = ColumnTable::from_rows(&format!("q{qid}"), &schema, &canonical(qid, rows))?;
    Ok(QueryRun { result, ops: p.s.ops, launches: p.s.launches.clone(), timeline: p.s.timeline()? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::gen::{generate, GenSpec};
    use crate::query::{expected_ops, oracle_query, QUERIES};

    #[test]
    fn queries_match_oracle_on_small_data() {
        let t = generate(&GenSpec::new(0.002, 11)).unwrap();
        let m = MachineConfig::desk().with_dpus(8);
        for q in QUERIES {
            for (agg, join) in [(AggAlgo::Hash, JoinAlgo::Hash), (AggAlgo::Sort, JoinAlgo::SortMerge)] {
                let opts = QueryOptions { agg, join, ..Default::default() };
                let r = run_query(q, &t, &m, &opts).unwrap();
                assert_eq!(r.result, oracle_query(q, &t).unwrap(), "q{q} {agg:?} {join:?}");
                assert_eq!(r.ops, expected_ops(q).unwrap(), "q{q}");
            }
        }
    }

    #[test]
    fn q4_never_multiplies() {
        let t = generate(&GenSpec::new(0.002, 5)).unwrap();
        let r = run_query(4, &t, &MachineConfig::desk().with_dpus(4), &QueryOptions::default()).unwrap();
        assert_eq!(r.class_total(InstrClass::Mul32) + r.class_total(InstrClass::Mul64), 0);
        let r1 = run_query(1, &t, &MachineConfig::desk().with_dpus(4), &QueryOptions::default()).unwrap();
        assert!(r1.class_total(InstrClass::Mul64) > 0);
    }

    #[test]
    fn empty_tables_run() {
        let t = generate(&GenSpec::new(0.001, 1)).unwrap().emptied();
        for q in QUERIES {
            let r = run_query(q, &t, &MachineConfig::desk().with_dpus(4), &QueryOptions::default()).unwrap();
            assert_eq!(r.result.row_count(), 0, "q{q}");
        }
    }
}
