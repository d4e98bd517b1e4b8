//! Cross-module invariants checked against host oracles over random
//! inputs.

use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;

use pimsim::experiments::{pipeline_session, run_micro, MicroOp, MicroSpec, PipelineShape};
use pimsim::host::{check_timeline, SchedMode, Session, SessionOptions};
use pimsim::kernels::{Insert, OnDuplicate, SpmHashTable};
use pimsim::machine::{InstrClass, MachineConfig};
use pimsim::ops::{
    aggregate_hash, aggregate_sort, collect_groups, fetch_rows, index_pairs, join_hash, join_sort_merge, load_rows,
    order_global, select, AggFn, AggSpec, CmpOp, JoinIndexPair, Pred,
};

fn session(dpus: usize, tasklets: usize) -> Session {
    let mut o = SessionOptions::default();
    o.kernel.tasklets = tasklets;
    Session::new(&MachineConfig::desk().with_dpus(dpus), o).unwrap()
}

/// Splits flat (key, value) pairs into `dpus` interleaved parts.
fn spread(rows: &[(i64, i64)], dpus: usize) -> Vec<Vec<u64>> {
    let mut per = vec![Vec::new(); dpus];
    for (i, &(k, v)) in rows.iter().enumerate() {
        per[i % dpus].extend([k as u64, v as u64]);
    }
    per
}

fn rows_strategy(max: usize, keys: i64) -> impl Strategy<Value = Vec<(i64, i64)>> {
    proptest::collection::vec((0..keys, -1000i64..1000), 0..max)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn hash_table_ten_thousand_inserts_then_probes(
        keys in proptest::collection::vec(-50_000i64..50_000, 1..10_000),
        absent in proptest::collection::vec(50_000i64..100_000, 1..200),
    ) {
        let cap = 1 << 15;
        let mut words = vec![0u64; SpmHashTable::words_needed(cap, 1)];
        let mut t = SpmHashTable::attach(&mut words, cap, 1, 0.5).unwrap();
        t.clear();
        let mut oracle: HashMap<i64, u64> = HashMap::new();
        let add = |a: &mut [u64], b: &[u64]| a[0] += b[0];
        for &k in &keys {
            let (r, probes) = t.insert(k, &[1], OnDuplicate::Combine(&add));
            prop_assert!(r != Insert::Full);
            prop_assert!(probes >= 1);
            *oracle.entry(k).or_default() += 1;
        }
        prop_assert_eq!(t.len(), oracle.len());
        prop_assert!(t.len() <= t.max_entries());
        for (&k, &n) in &oracle {
            let slot = t.probe(k).0;
            prop_assert!(slot.is_some(), "inserted key {} not found", k);
            prop_assert_eq!(t.payload(slot.unwrap())[0], n);
        }
        for &k in &absent {
            prop_assert_eq!(t.probe(k).0, None);
        }
    }

    #[test]
    fn selection_keeps_matching_rows_in_order(rows in rows_strategy(3000, 100), dpus in 1usize..5, tn in 1usize..25, lim in 0i64..100) {
        let mut s = session(dpus, tn);
        let per = spread(&rows, dpus);
        let t = load_rows(&mut s, &["k", "v"], &per).unwrap();
        let f = select(&mut s, &t, &[Pred::cmp(0, CmpOp::Lt, lim)]).unwrap();
        let got = fetch_rows(&mut s, &f).unwrap();
        let want: Vec<Vec<i64>> = per
            .iter()
            .flat_map(|p| p.chunks(2).map(|c| vec![c[0] as i64, c[1] as i64]).collect::<Vec<_>>())
            .filter(|r| r[0] < lim)
            .collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn hash_and_sort_aggregation_agree_with_group_by(rows in rows_strategy(4000, 300), dpus in 1usize..5, tn in 1usize..25) {
        let spec = AggSpec::new(vec![AggFn::Count, AggFn::Sum(1), AggFn::Avg(1)]);
        let mut want: BTreeMap<i64, (i64, i64)> = BTreeMap::new();
        for &(k, v) in &rows {
            let e = want.entry(k).or_default();
            e.0 += 1;
            e.1 += v;
        }
        let mut results = Vec::new();
        for hash in [true, false] {
            let mut s = session(dpus, tn);
            let t = load_rows(&mut s, &["k", "v"], &spread(&rows, dpus)).unwrap();
            let p = if hash { aggregate_hash(&mut s, &t, &spec) } else { aggregate_sort(&mut s, &t, &spec) }.unwrap();
            let groups = collect_groups(&mut s, &p).unwrap();
            let fin: BTreeMap<i64, Vec<i64>> = groups.iter().map(|(&k, l)| (k, spec.finalize(l))).collect();
            results.push(fin);
        }
        prop_assert_eq!(&results[0], &results[1]);
        prop_assert_eq!(results[0].len(), want.len());
        for (k, (n, sum)) in want {
            let avg = if sum < 0 { -((-sum) / n) } else { sum / n };
            prop_assert_eq!(&results[0][&k], &vec![n, sum, avg]);
        }
    }

    #[test]
    fn global_order_sorts_and_preserves_records(rows in rows_strategy(4000, i64::MAX), dpus in 1usize..9, tn in 1usize..25) {
        let mut s = session(dpus, tn);
        let t = load_rows(&mut s, &["k", "v"], &spread(&rows, dpus)).unwrap();
        let o = order_global(&mut s, &t).unwrap();
        let got = fetch_rows(&mut s, &o).unwrap();
        prop_assert!(got.windows(2).all(|p| p[0][0] <= p[1][0]));
        let mut a: Vec<(i64, i64)> = got.iter().map(|r| (r[0], r[1])).collect();
        let mut b = rows.clone();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn both_joins_produce_the_oracle_pairs(
        inner_keys in proptest::collection::hash_set(0i64..5000, 0..1500),
        outer_keys in proptest::collection::vec(0i64..6000, 0..3000),
        dpus in 1usize..7,
        tn in 1usize..25,
    ) {
        let inner: Vec<(i64, i64)> = inner_keys.iter().copied().enumerate().map(|(i, k)| (k, i as i64)).collect();
        let outer: Vec<(i64, i64)> = outer_keys.iter().copied().enumerate().map(|(i, k)| (k, i as i64)).collect();
        let at: HashMap<i64, i64> = inner.iter().copied().collect();
        let mut want: Vec<JoinIndexPair> = outer
            .iter()
            .filter_map(|&(k, o)| at.get(&k).map(|&i| JoinIndexPair { inner: i as u64, outer: o as u64 }))
            .collect();
        want.sort_unstable();
        for hash in [true, false] {
            let mut s = session(dpus, tn);
            let i = load_rows(&mut s, &["k", "i"], &spread(&inner, dpus)).unwrap();
            let o = load_rows(&mut s, &["k", "o"], &spread(&outer, dpus)).unwrap();
            let j = if hash { join_hash(&mut s, &i, &o) } else { join_sort_merge(&mut s, &i, &o) }.unwrap();
            let rows = fetch_rows(&mut s, &j).unwrap();
            prop_assert!(rows.iter().all(|r| at.get(&r[0]) == Some(&r[2])), "row key differs from its inner row");
            prop_assert_eq!(&index_pairs(&rows, 2, 1), &want, "hash {}", hash);
        }
    }
}

#[test]
fn ipc_never_drops_while_adding_tasklets_up_to_eleven() {
    let m = MachineConfig::desk();
    for op in MicroOp::ALL {
        let ipc: Vec<f64> = (1..=11)
            .map(|t| run_micro(&m, &MicroSpec::new(op, 2, t, 4096, 3), &SessionOptions::default()).unwrap().ipc)
            .collect();
        assert!(ipc.windows(2).all(|p| p[1] >= p[0]), "{op}: {ipc:?}");
        for (i, v) in ipc.iter().enumerate() {
            assert!(*v <= ((i + 1) as f64 / 11.0).min(1.0) + 1e-12, "{op} at {}: {v}", i + 1);
        }
    }
}

#[test]
fn hash_kernels_never_multiply_or_divide() {
    let m = MachineConfig::desk();
    for op in [MicroOp::AggregateHash, MicroOp::JoinHash] {
        let spec = MicroSpec { param: 5000, ..MicroSpec::new(op, 4, 16, 3000, 8) };
        let r = pimsim::experiments::run_micro_session(&m, &spec, &SessionOptions::default()).unwrap();
        for l in &r.session.launches {
            for k in &l.metrics {
                for c in [InstrClass::Mul32, InstrClass::Mul64, InstrClass::Div32] {
                    assert_eq!(k.class(c), 0, "{} charged {c:?}", l.kernel);
                }
            }
        }
    }
}

#[test]
fn async_schedules_are_legal_and_never_slower() {
    let m = MachineConfig::desk();
    for shape in [PipelineShape::TransferHeavy, PipelineShape::Aggregation] {
        for dpus in [4, 8, 16, 32] {
            let s = pipeline_session(&m, shape, dpus, 2000, 4, &SessionOptions::default()).unwrap();
            let sync = s.timeline_with(SchedMode::Sync).unwrap();
            let asyn = s.timeline_with(SchedMode::Async).unwrap();
            check_timeline(&sync).unwrap();
            check_timeline(&asyn).unwrap();
            assert!(asyn.makespan_ns <= sync.makespan_ns, "{shape:?} at {dpus}");
            assert_eq!(asyn, s.timeline_with(SchedMode::Async).unwrap());
        }
    }
}

#[test]
fn repeated_runs_leave_identical_memory_and_metrics() {
    let m = MachineConfig::desk();
    let spec = MicroSpec { param: 700, ..MicroSpec::new(MicroOp::AggregateHash, 3, 13, 5000, 21) };
    let a = pimsim::experiments::run_micro_session(&m, &spec, &SessionOptions::default()).unwrap();
    let b = pimsim::experiments::run_micro_session(&m, &spec, &SessionOptions::default()).unwrap();
    assert_eq!(a.session.launches, b.session.launches);
    let words = 5000 * 6;
    for d in 0..3 {
        assert_eq!(a.session.peek(d, 0, words).unwrap(), b.session.peek(d, 0, words).unwrap());
    }
}
