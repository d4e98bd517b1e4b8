//! Acceptance gate. Each test checks one criterion and writes a single
//! `PASS`/`FAIL` line straight to stderr, so the verdicts show up even
//! when the harness captures test output.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use pimsim::experiments::{
    agg_crossover, async_gain, calibrate, ipc_sweep, radix_sweep, run_micro_session, scaling, transfer_modes,
    write_records_csv, MicroOp, MicroSpec, PipelineShape, Scaling,
};
use pimsim::host::{Session, SessionOptions};
use pimsim::machine::MachineConfig;
use pimsim::ops::{
    aggregate_hash, aggregate_sort, collect_groups, fetch_rows, join_hash, join_sort_merge, load_rows, order_global,
    select, AggAlgo, AggFn, AggSpec, CmpOp, JoinAlgo, Pred,
};
use pimsim::query::{expected_ops, generate, oracle_query, run_query, GenSpec, QueryOptions, QUERIES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn report(n: u32, name: &str, v: Verdict) {
    let line = match &v {
        Ok(d) => format!("PASS criterion {n} ({name}): {d}"),
        Err(d) => format!("FAIL criterion {n} ({name}): {d}"),
    };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
    drop(err);
    assert!(v.is_ok(), "{line}");
}

fn check(ok: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

fn desk() -> MachineConfig {
    MachineConfig::desk()
}

// ---------------------------------------------------------------- 1

const INSTANCES: usize = 200;
const SUITE_SEED: u64 = 0x5eed_0001;

#[derive(Debug, Clone, Copy)]
struct Instance {
    seed: u64,
    dpus: usize,
    tasklets: usize,
    rows: usize,
}

impl Instance {
    /// Record counts per DPU are log-uniform over 10..=65536.
    fn draw(op: usize, i: usize) -> Instance {
        let seed = SUITE_SEED ^ ((op as u64) << 32) ^ i as u64;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let rows = (10f64 * (6553.6f64).powf(r.gen::<f64>())).round() as usize;
        Instance { seed, dpus: r.gen_range(1..=32), tasklets: r.gen_range(1..=24), rows: rows.clamp(10, 65536) }
    }

    fn session(&self) -> Session {
        let mut o = SessionOptions::default();
        o.kernel.tasklets = self.tasklets;
        Session::new(&desk().with_dpus(self.dpus), o).expect("valid session")
    }

    /// Per-DPU sizes vary by up to a factor of two around `rows`.
    fn sizes(&self, r: &mut ChaCha8Rng) -> Vec<usize> {
        (0..self.dpus).map(|_| r.gen_range(self.rows / 2..=self.rows)).collect()
    }
}

fn as_i64(rows: &[Vec<u64>], w: usize) -> Vec<Vec<i64>> {
    rows.iter().flat_map(|p| p.chunks_exact(w).map(|c| c.iter().map(|&v| v as i64).collect())).collect()
}

fn selection_case(c: Instance) -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(c.seed);
    let per: Vec<Vec<u64>> =
        c.sizes(&mut r).iter().map(|&n| (0..n).flat_map(|_| [r.gen_range(0..1000), r.gen_range(0..50)]).collect()).collect();
    let (cut, ne) = (r.gen_range(0..1000), r.gen_range(0..50));
    let mut s = c.session();
    let t = load_rows(&mut s, &["a", "b"], &per).map_err(|e| e.to_string())?;
    let preds = [Pred::cmp(0, CmpOp::Lt, cut), Pred::cmp(1, CmpOp::Ne, ne)];
    let out = select(&mut s, &t, &preds).map_err(|e| e.to_string())?;
    let got = fetch_rows(&mut s, &out).map_err(|e| e.to_string())?;
    let want: Vec<Vec<i64>> = as_i64(&per, 2).into_iter().filter(|x| x[0] < cut && x[1] != ne).collect();
    check(got == want, || format!("selection differs ({} vs {} rows)", got.len(), want.len()))
}

fn aggregation_case(c: Instance, algo: AggAlgo) -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(c.seed);
    let uniques = 1u64 << r.gen_range(0..=20);
    let per: Vec<Vec<u64>> = c
        .sizes(&mut r)
        .iter()
        .map(|&n| (0..n).flat_map(|_| [r.gen_range(0..uniques), r.gen_range(0..1_000_000), r.gen_range(0..100)]).collect())
        .collect();
    let spec = AggSpec::new(vec![AggFn::Sum(1), AggFn::Count, AggFn::Avg(2)]);
    let mut s = c.session();
    let t = load_rows(&mut s, &["k", "v", "x"], &per).map_err(|e| e.to_string())?;
    let part = match algo {
        AggAlgo::Hash => aggregate_hash(&mut s, &t, &spec),
        AggAlgo::Sort => aggregate_sort(&mut s, &t, &spec),
    }
    .map_err(|e| e.to_string())?;
    let got: BTreeMap<i64, Vec<i64>> = collect_groups(&mut s, &part)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(k, lanes)| (k, spec.finalize(&lanes)))
        .collect();
    let mut acc: BTreeMap<i64, (i64, i64, i64)> = BTreeMap::new();
    for x in as_i64(&per, 3) {
        let e = acc.entry(x[0]).or_default();
        e.0 += x[1];
        e.1 += 1;
        e.2 += x[2];
    }
    let want: BTreeMap<i64, Vec<i64>> = acc.into_iter().map(|(k, (s, n, x))| (k, vec![s, n, x / n])).collect();
    check(got == want, || format!("{algo:?} aggregation differs ({} vs {} groups)", got.len(), want.len()))
}

fn order_case(c: Instance) -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(c.seed);
    let span = if r.gen_bool(0.5) { 1 << 40 } else { r.gen_range(1..=1000) };
    let per: Vec<Vec<u64>> =
        c.sizes(&mut r).iter().map(|&n| (0..n).flat_map(|i| [r.gen_range(0..span), i as u64]).collect()).collect();
    let mut s = c.session();
    let t = load_rows(&mut s, &["k", "v"], &per).map_err(|e| e.to_string())?;
    let out = order_global(&mut s, &t).map_err(|e| e.to_string())?;
    let got = fetch_rows(&mut s, &out).map_err(|e| e.to_string())?;
    check(got.windows(2).all(|p| p[0][0] <= p[1][0]), || "keys out of order".into())?;
    let mut got = got;
    got.sort();
    let mut want = as_i64(&per, 2);
    want.sort();
    check(got == want, || format!("ordered multiset differs ({} vs {} rows)", got.len(), want.len()))
}

fn join_case(c: Instance, algo: JoinAlgo) -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(c.seed);
    let sizes = c.sizes(&mut r);
    let total: usize = sizes.iter().sum();
    // Unique inner keys drawn without replacement from twice the range.
    let mut keys: Vec<u64> = rand::seq::index::sample(&mut r, 2 * total.max(1), total).into_iter().map(|k| k as u64).collect();
    keys.sort_unstable_by_key(|k| k.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut inner = Vec::new();
    let mut at = 0;
    for &n in &sizes {
        inner.push(keys[at..at + n].iter().enumerate().flat_map(|(i, &k)| [k, (at + i) as u64]).collect::<Vec<u64>>());
        at += n;
    }
    let outer: Vec<Vec<u64>> = sizes
        .iter()
        .map(|&n| (0..n).flat_map(|j| [r.gen_range(0..2 * total.max(1) as u64), j as u64]).collect())
        .collect();
    let mut s = c.session();
    let i = load_rows(&mut s, &["k", "i"], &inner).map_err(|e| e.to_string())?;
    let o = load_rows(&mut s, &["k", "o"], &outer).map_err(|e| e.to_string())?;
    let out = match algo {
        JoinAlgo::Hash => join_hash(&mut s, &i, &o),
        JoinAlgo::SortMerge => join_sort_merge(&mut s, &i, &o),
    }
    .map_err(|e| e.to_string())?;
    let mut got = fetch_rows(&mut s, &out).map_err(|e| e.to_string())?;
    got.sort();
    let idx: BTreeMap<i64, i64> = as_i64(&inner, 2).into_iter().map(|x| (x[0], x[1])).collect();
    let mut want: Vec<Vec<i64>> =
        as_i64(&outer, 2).into_iter().filter_map(|x| idx.get(&x[0]).map(|&v| vec![x[0], x[1], v])).collect();
    want.sort();
    check(got == want, || format!("{algo:?} join differs ({} vs {} rows)", got.len(), want.len()))
}

#[test]
fn criterion_1_correctness_suite() {
    let start = Instant::now();
    type Case = fn(Instance) -> Result<(), String>;
    let ops: [(&str, Case); 6] = [
        ("selection", selection_case),
        ("aggregate_hash", |c| aggregation_case(c, AggAlgo::Hash)),
        ("aggregate_sort", |c| aggregation_case(c, AggAlgo::Sort)),
        ("order", order_case),
        ("join_hash", |c| join_case(c, JoinAlgo::Hash)),
        ("join_sort_merge", |c| join_case(c, JoinAlgo::SortMerge)),
    ];
    let mut failures = Vec::new();
    let mut per_op = Vec::new();
    for (k, (name, f)) in ops.iter().enumerate() {
        let (t0, before) = (Instant::now(), failures.len());
        for i in 0..INSTANCES {
            let c = Instance::draw(k, i);
            if let Err(e) = f(c) {
                failures.push(format!("{name} seed {:#x} ({} dpus, {} tasklets, ~{} rows): {e}", c.seed, c.dpus, c.tasklets, c.rows));
            }
        }
        per_op.push(format!("{name} {} failed in {:.1?}", failures.len() - before, t0.elapsed()));
    }
    if !failures.is_empty() {
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "correctness suite: {}", per_op.join(", "));
        for f in &failures {
            let _ = writeln!(err, "  {f}");
        }
    }
    let took = start.elapsed();
    let v = if !failures.is_empty() {
        Err(format!("{} of {} instances failed, first: {}", failures.len(), INSTANCES * ops.len(), failures[0]))
    } else if took > Duration::from_secs(300) {
        Err(format!("all {} instances match but took {took:.1?} (budget 300 s)", INSTANCES * ops.len()))
    } else {
        Ok(format!("{} instances over 6 operators match host oracles in {took:.1?}, base seed {SUITE_SEED:#x}", INSTANCES * ops.len()))
    };
    report(1, "correctness suite", v);
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_query_equivalence() {
    let start = Instant::now();
    let v = (|| -> Verdict {
        let m = desk();
        let mut runs = 0;
        for sf in [0.01, 0.1] {
            let t = generate(&GenSpec::new(sf, 42)).map_err(|e| e.to_string())?;
            for q in QUERIES {
                let want = oracle_query(q, &t).map_err(|e| e.to_string())?;
                for (agg, join) in [(AggAlgo::Hash, JoinAlgo::Hash), (AggAlgo::Sort, JoinAlgo::SortMerge)] {
                    let opts = QueryOptions { agg, join, ..Default::default() };
                    let r = run_query(q, &t, &m, &opts).map_err(|e| format!("q{q} sf {sf}: {e}"))?;
                    check(r.result == want, || format!("q{q} sf {sf} {agg:?}/{join:?} result differs from oracle"))?;
                    let ops = expected_ops(q).map_err(|e| e.to_string())?;
                    check(r.ops == ops, || format!("q{q} operator counts {:?}, expected {ops:?}", r.ops))?;
                    runs += 1;
                }
            }
        }
        let took = start.elapsed();
        check(took < Duration::from_secs(600), || format!("took {took:.1?} (budget 600 s)"))?;
        Ok(format!("{runs} runs of Q1/3/4/5/6 at sf 0.01 and 0.1 match the oracle and operator counts in {took:.1?}"))
    })();
    report(2, "query equivalence", v);
}

// ---------------------------------------------------------------- 3

fn r_squared(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - (my + slope * (x - mx))).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    (1.0 - ss_res / ss_tot, slope)
}

#[test]
fn criterion_3_ipc_law() {
    let v = (|| -> Verdict {
        let m = desk();
        let mut launches = 0;
        for op in MicroOp::ALL {
            for t in 1..=24 {
                let spec = MicroSpec::new(op, 2, t, 4096, 7);
                let run = run_micro_session(&m, &spec, &SessionOptions::default()).map_err(|e| e.to_string())?;
                let bound = (t as f64 / m.dispatch_gap as f64).min(1.0);
                for l in &run.session.launches {
                    for k in &l.metrics {
                        check(k.ipc <= bound + 1e-12, || format!("{} at T={t}: IPC {:.4} > {bound:.4}", l.kernel, k.ipc))?;
                        launches += 1;
                    }
                }
            }
        }
        let ts: Vec<usize> = (1..=24).collect();
        let sel = ipc_sweep(&m, MicroOp::Selection, &ts, 65536, 2, 7).map_err(|e| e.to_string())?;
        let thr: Vec<f64> = sel.iter().map(|r| r.rows_per_dpu as f64 / r.kernel_seconds).collect();
        let x: Vec<f64> = (1..=11).map(|t| t as f64).collect();
        let (r2, slope) = r_squared(&x, &thr[..11]);
        check(r2 >= 0.98, || format!("selection throughput over T=1..11 has R² {r2:.4}"))?;
        let xh: Vec<f64> = (12..=24).map(|t| t as f64).collect();
        let (_, tail) = r_squared(&xh, &thr[11..]);
        check(tail < 0.2 * slope, || format!("selection slope beyond 11 tasklets {tail:.0} vs {slope:.0}"))?;
        let ord = ipc_sweep(&m, MicroOp::Order, &ts, 65536, 1, 7).map_err(|e| e.to_string())?;
        let low = ord[15..].iter().map(|r| r.ipc).fold(f64::INFINITY, f64::min);
        let peak = ord.iter().map(|r| r.ipc).fold(0.0, f64::max);
        check(low >= 0.85, || format!("ordering IPC drops to {low:.3} at some T ≥ 16"))?;
        Ok(format!(
            "{launches} launches within min(1, T/11); selection R² {r2:.4}, tail slope {:.1}% of linear; ordering IPC ≥ {low:.3} for T ≥ 16 (peak {peak:.3})",
            100.0 * tail / slope
        ))
    })();
    report(3, "IPC law", v);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_aggregation_crossover() {
    let v = (|| -> Verdict {
        let m = desk();
        let sweep: Vec<u64> = (6..=20).map(|b| 1u64 << b).collect();
        let pts = agg_crossover(&m, &sweep, 65536, 16, 11).map_err(|e| e.to_string())?;
        let hash: Vec<f64> = pts.iter().map(|(h, _)| h.kernel_seconds).collect();
        let sort: Vec<f64> = pts.iter().map(|(_, s)| s.kernel_seconds).collect();
        check(hash.windows(2).all(|p| p[1] >= p[0]), || format!("hash time decreases somewhere: {hash:?}"))?;
        let strict = hash.windows(2).filter(|p| p[1] > p[0]).count();
        check(strict >= 4, || format!("only {strict} strict increases"))?;
        let (lo, hi) = sort.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        let spread = hi / lo - 1.0;
        check(spread <= 0.15, || format!("sort aggregation varies {:.1}%", 100.0 * spread))?;
        let (h50, s50) = agg_crossover(&m, &[50], 65536, 16, 11).map_err(|e| e.to_string())?.remove(0);
        let ratio = s50.kernel_seconds / h50.kernel_seconds;
        check(ratio >= 2.0, || format!("hash only {ratio:.2}x faster at 50 groups"))?;
        Ok(format!(
            "hash rises {:.1}x with {strict} strict steps over 2^6..2^20 keys; sort spread {:.1}%; hash {ratio:.1}x faster at 50 groups",
            hash[hash.len() - 1] / hash[0],
            100.0 * spread
        ))
    })();
    report(4, "aggregation crossover", v);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_calibration() {
    let v = (|| -> Verdict {
        let c = calibrate(&desk()).map_err(|e| e.to_string())?;
        let s = format!(
            "MRAM read {:.1} MB/s, write {:.1} MB/s, scratchpad {:.1} MB/s",
            c.mram_read_mbps, c.mram_write_mbps, c.wram_mbps
        );
        for (got, want) in [(c.mram_read_mbps, 628.0), (c.mram_write_mbps, 633.0), (c.wram_mbps, 2818.0)] {
            check((got / want - 1.0).abs() <= 0.10, || format!("{s}: {got:.1} is not within 10% of {want}"))?;
        }
        Ok(s)
    })();
    report(5, "calibration", v);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_6_transfer_ordering() {
    let v = (|| -> Verdict {
        let m = desk();
        let r = transfer_modes(&m, 32, 8192, 16, 13).map_err(|e| e.to_string())?;
        let t: Vec<f64> = r.iter().map(|x| x.makespan_seconds).collect();
        check(t[0] > t[1] && t[1] > t[2] && t[2] >= t[3], || format!("makespans out of order: {t:?}"))?;
        let (hs, ha) = async_gain(&m, PipelineShape::TransferHeavy, 16, 8192, 13).map_err(|e| e.to_string())?;
        let (gs, ga) = async_gain(&m, PipelineShape::Aggregation, 16, 8192, 13).map_err(|e| e.to_string())?;
        let heavy = 1.0 - ha as f64 / hs as f64;
        let agg = 1.0 - ga as f64 / gs as f64;
        check(heavy >= 0.05, || format!("async gain on the transfer-heavy pipeline is {:.2}%", 100.0 * heavy))?;
        check(agg.abs() < 0.01, || format!("async gain on the aggregation pipeline is {:.2}%", 100.0 * agg))?;
        Ok(format!(
            "naive {:.3} > sg {:.3} > pooled {:.3} ≥ async {:.3} ms; async gain {:.1}% transfer-heavy, {:.2}% aggregation",
            t[0] * 1e3,
            t[1] * 1e3,
            t[2] * 1e3,
            t[3] * 1e3,
            100.0 * heavy,
            100.0 * agg
        ))
    })();
    report(6, "transfer optimization ordering", v);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_scaling() {
    let v = (|| -> Verdict {
        let m = desk();
        let dpus = [4, 8, 16, 32];
        let mut notes = Vec::new();
        for op in [MicroOp::Selection, MicroOp::Order] {
            let strong = scaling(&m, op, Scaling::Strong, &dpus, 1 << 19, 16, 17).map_err(|e| e.to_string())?;
            let t: Vec<f64> = strong.iter().map(|r| r.kernel_seconds).collect();
            check(t.windows(2).all(|p| p[1] < p[0]), || format!("{op} strong scaling not decreasing: {t:?}"))?;
            let eff = t[0] * 4.0 / (t[3] * 32.0);
            check(eff >= 0.6, || format!("{op} strong efficiency at 32 DPUs is {eff:.2}"))?;
            let weak = scaling(&m, op, Scaling::Weak, &dpus, 16384, 16, 17).map_err(|e| e.to_string())?;
            let e: Vec<f64> = weak.iter().map(|r| weak[0].kernel_seconds / r.kernel_seconds).collect();
            check(e.iter().all(|&x| x > 0.0 && x <= 1.0), || format!("{op} weak efficiency outside (0, 1]: {e:?}"))?;
            check(e.windows(2).all(|p| p[1] <= p[0]), || format!("{op} weak efficiency increases: {e:?}"))?;
            notes.push(format!("{op} strong eff {eff:.2}, weak eff {:.3} at 32", e[3]));
        }
        Ok(notes.join("; "))
    })();
    report(7, "scaling shapes", v);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_radix_sweep() {
    let v = (|| -> Verdict {
        let bpp = [3, 4, 5, 6];
        let r = radix_sweep(&desk(), &bpp, 15, 65536, 16, 19).map_err(|e| e.to_string())?;
        let t: Vec<f64> = r.iter().map(|x| x.kernel_seconds).collect();
        let best = (0..t.len()).min_by(|&a, &b| t[a].total_cmp(&t[b])).expect("non-empty sweep");
        check(best > 0 && best + 1 < t.len(), || format!("optimum at the edge: {t:?}"))?;
        let ms: Vec<String> = t.iter().map(|x| format!("{:.1}", x * 1e3)).collect();
        Ok(format!("15 bits at 3/4/5/6 bits per pass take {} ms; optimum {} bits per pass", ms.join("/"), bpp[best]))
    })();
    report(8, "radix sweep", v);
}

// ---------------------------------------------------------------- 9

/// Metrics CSV and query result files of a small acceptance run.
fn artifacts(dir: &std::path::Path, seed: u64) -> pimsim::Result<()> {
    let m = desk();
    let mut recs = Vec::new();
    for op in MicroOp::ALL {
        let spec = MicroSpec::new(op, 8, 16, 2000, seed);
        let run = run_micro_session(&m, &spec, &SessionOptions::default())?;
        recs.push(pimsim::experiments::summarize(&run.session, "micro", op.name(), 2000, spec.param, seed)?);
    }
    recs.extend(agg_crossover(&m, &[64, 4096], 8192, 16, seed)?.into_iter().flat_map(|(a, b)| [a, b]));
    recs.extend(transfer_modes(&m, 8, 2048, 16, seed)?);
    write_records_csv(&recs, std::fs::File::create(dir.join("metrics.csv"))?)?;
    let t = generate(&GenSpec::new(0.01, seed))?;
    for q in QUERIES {
        let r = run_query(q, &t, &m.with_dpus(8), &QueryOptions::default())?;
        r.result.write_binary(std::fs::File::create(dir.join(format!("q{q}.bin")))?)?;
        r.result.write_csv(std::fs::File::create(dir.join(format!("q{q}.csv")))?)?;
        let tl = serde_json::to_vec(&r.timeline.events).expect("timeline serializes");
        std::fs::write(dir.join(format!("q{q}.timeline.json")), tl)?;
    }
    Ok(())
}

#[test]
fn criterion_9_determinism() {
    let v = (|| -> Verdict {
        let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
        artifacts(a.path(), 23).map_err(|e| e.to_string())?;
        artifacts(b.path(), 23).map_err(|e| e.to_string())?;
        let mut names: Vec<_> = std::fs::read_dir(a.path())
            .map_err(|e| e.to_string())?
            .map(|e| e.map(|e| e.file_name()).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        names.sort();
        let mut bytes = 0;
        for n in &names {
            let x = std::fs::read(a.path().join(n)).map_err(|e| e.to_string())?;
            let y = std::fs::read(b.path().join(n)).map_err(|e| format!("{n:?} missing in rerun: {e}"))?;
            check(x == y, || format!("{n:?} differs between runs"))?;
            bytes += x.len();
        }
        Ok(format!("{} files ({bytes} bytes) identical across two runs with seed 23", names.len()))
    })();
    report(9, "determinism", v);
}
