//! Transfer/execution timelines and the scheduler that builds them from a
//! dependency graph of host, transfer and kernel tasks.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    HostAlloc,
    HostReorder,
    H2p,
    P2h,
    Kernel,
}

impl EventKind {
    pub fn is_transfer(self) -> bool {
        matches!(self, EventKind::H2p | EventKind::P2h)
    }

    /// Runs on a host thread.
    pub fn uses_host_thread(self) -> bool {
        !matches!(self, EventKind::Kernel)
    }
}

/// One bar of the timeline. `rank` is `None` for host-only work.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub kind: EventKind,
    pub rank: Option<usize>,
    pub start_ns: u64,
    pub end_ns: u64,
    pub bytes: u64,
}

/// Seconds to whole nanoseconds, rounding up so no work is free.
pub fn ns(seconds: f64) -> u64 {
    (seconds * 1e9).ceil().max(0.0) as u64
}

/// A unit of work waiting to be placed on the timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub kind: EventKind,
    pub rank: Option<usize>,
    pub dur_ns: u64,
    pub bytes: u64,
    /// Indices of tasks that must finish first.
    pub deps: Vec<usize>,
    /// Barrier group used by synchronous scheduling.
    pub phase: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchedMode {
    /// Every phase finishes on all ranks before the next one starts.
    #[default]
    Sync,
    /// Ranks advance independently.
    Async,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Timeline {
    /// Events in task order.
    pub events: Vec<TimelineEvent>,
    pub makespan_ns: u64,
}

impl Timeline {
    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn busy_ns(&self, kind: EventKind) -> u64 {
        self.events.iter().filter(|e| e.kind == kind).map(|e| e.end_ns - e.start_ns).sum()
    }
}

fn check_acyclic(tasks: &[Task]) -> Result<()> {
    let n = tasks.len();
    let mut indeg = vec![0usize; n];
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, t) in tasks.iter().enumerate() {
        for &d in &t.deps {
            if d >= n {
                return Err(SimError::Internal(format!("task {i} depends on missing task {d}")));
            }
            indeg[i] += 1;
            users[d].push(i);
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = ready.pop() {
        seen += 1;
        for &u in &users[i] {
            indeg[u] -= 1;
            if indeg[u] == 0 {
                ready.push(u);
            }
        }
    }
    if seen < n {
        let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap_or(0);
        return Err(SimError::DependencyCycle(stuck));
    }
    Ok(())
}

/// Greedy list scheduling. A task starts once its dependencies are done,
/// its rank is idle, a host thread is free when it needs one, and (with
/// `barriers`) every task of earlier phases has finished. Ties go to the
/// task with the smallest `priority`, then the smallest index.
fn list_schedule(tasks: &[Task], host_threads: usize, barriers: bool, priority: &[u64]) -> Result<Vec<(u64, u64)>> {
    let n = tasks.len();
    let ranks = tasks.iter().filter_map(|t| t.rank).max().map_or(0, |r| r + 1);
    let mut rank_free = vec![0u64; ranks];
    let mut slots: Vec<u64> = vec![0; host_threads.max(1)];
    let mut span = vec![(0u64, 0u64); n];
    let mut done = vec![false; n];
    let mut started = vec![false; n];
    let max_phase = tasks.iter().map(|t| t.phase).max().unwrap_or(0);
    let mut phase_left = vec![0usize; max_phase + 1];
    for t in tasks {
        phase_left[t.phase] += 1;
    }
    // Completion events not yet processed: (time, task).
    let mut running: BTreeSet<(u64, usize)> = BTreeSet::new();
    let mut now = 0u64;
    let mut finished = 0;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (priority[i], i));
    while finished < n {
        let open_phase = phase_left.iter().position(|&c| c > 0).unwrap_or(max_phase);
        for &i in &order {
            let t = &tasks[i];
            if started[i] || (barriers && t.phase > open_phase) {
                continue;
            }
            if !t.deps.iter().all(|&d| done[d]) {
                continue;
            }
            if let Some(r) = t.rank {
                if rank_free[r] > now {
                    continue;
                }
            }
            let slot = if t.kind.uses_host_thread() {
                match slots.iter().position(|&f| f <= now) {
                    Some(s) => Some(s),
                    None => continue,
                }
            } else {
                None
            };
            let end = now + t.dur_ns;
            span[i] = (now, end);
            started[i] = true;
            if let Some(r) = t.rank {
                rank_free[r] = end;
            }
            if let Some(s) = slot {
                slots[s] = end;
            }
            running.insert((end, i));
        }
        // Advance to the next completion and retire everything ending then.
        let Some(&(t_next, _)) = running.iter().next() else {
            // Only reachable when a task depends on one in a later phase.
            return Err(SimError::Internal("tasks wait on a later barrier phase".into()));
        };
        now = t_next;
        while let Some(&(e, i)) = running.iter().next() {
            if e > now {
                break;
            }
            running.remove(&(e, i));
            done[i] = true;
            finished += 1;
            phase_left[tasks[i].phase] -= 1;
        }
    }
    Ok(span)
}

fn to_timeline(tasks: &[Task], span: &[(u64, u64)]) -> Timeline {
    let events: Vec<TimelineEvent> = tasks
        .iter()
        .zip(span)
        .map(|(t, &(s, e))| TimelineEvent { kind: t.kind, rank: t.rank, start_ns: s, end_ns: e, bytes: t.bytes })
        .collect();
    let makespan_ns = events.iter().map(|e| e.end_ns).max().unwrap_or(0);
    Timeline { events, makespan_ns }
}

/// Places `tasks` on a timeline. The asynchronous policy dispatches
/// greedily in the order the synchronous schedule would start tasks, and
/// keeps the synchronous placement when greedy dispatch would finish later.
pub fn schedule(tasks: &[Task], mode: SchedMode, host_threads: usize) -> Result<Timeline> {
    check_acyclic(tasks)?;
    if host_threads == 0 {
        return Err(SimError::Config("host_threads must be positive".into()));
    }
    let plain: Vec<u64> = vec![0; tasks.len()];
    let sync = list_schedule(tasks, host_threads, true, &plain)?;
    let sync_tl = to_timeline(tasks, &sync);
    match mode {
        SchedMode::Sync => Ok(sync_tl),
        SchedMode::Async => {
            let prio: Vec<u64> = sync.iter().map(|&(s, _)| s).collect();
            let greedy = to_timeline(tasks, &list_schedule(tasks, host_threads, false, &prio)?);
            Ok(if greedy.makespan_ns <= sync_tl.makespan_ns { greedy } else { sync_tl })
        }
    }
}

/// A step of a per-rank pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub kind: EventKind,
    pub dur_ns: u64,
    pub bytes: u64,
}

/// Schedules one stage sequence per rank: stage `i` of a rank depends on
/// its stage `i - 1`, and in synchronous mode stage `i` of every rank
/// finishes before any rank starts stage `i + 1`.
pub fn run_pipeline(stages: &[Vec<Stage>], mode: SchedMode, host_threads: usize) -> Result<Timeline> {
    let mut tasks = Vec::new();
    for (rank, seq) in stages.iter().enumerate() {
        let mut prev: Option<usize> = None;
        for (i, s) in seq.iter().enumerate() {
            tasks.push(Task {
                kind: s.kind,
                rank: Some(rank),
                dur_ns: s.dur_ns,
                bytes: s.bytes,
                deps: prev.into_iter().collect(),
                phase: i,
            });
            prev = Some(tasks.len() - 1);
        }
    }
    schedule(&tasks, mode, host_threads)
}

/// Rejects timelines in which a transfer overlaps a kernel on the same rank.
pub fn check_timeline(tl: &Timeline) -> Result<()> {
    for k in tl.events.iter().filter(|e| e.kind == EventKind::Kernel) {
        for x in tl.events.iter().filter(|e| e.kind.is_transfer() && e.rank == k.rank) {
            if x.start_ns < k.end_ns && k.start_ns < x.end_ns {
                return Err(SimError::KernelActiveConflict { rank: k.rank.unwrap_or(usize::MAX) });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn st(kind: EventKind, dur_ns: u64) -> Stage {
        Stage { kind, dur_ns, bytes: 0 }
    }

    fn overlaps(a: &TimelineEvent, b: &TimelineEvent) -> bool {
        a.start_ns < b.end_ns && b.start_ns < a.end_ns
    }

    #[test]
    fn single_rank_sync_equals_async() {
        let p = vec![vec![st(EventKind::H2p, 100), st(EventKind::Kernel, 50), st(EventKind::P2h, 70)]];
        let s = run_pipeline(&p, SchedMode::Sync, 4).unwrap();
        let a = run_pipeline(&p, SchedMode::Async, 4).unwrap();
        assert_eq!(s.makespan_ns, 220);
        assert_eq!(a.makespan_ns, 220);
    }

    #[test]
    fn transfer_heavy_pipeline_gains_from_async() {
        let p: Vec<Vec<Stage>> = (0..4)
            .map(|_| vec![st(EventKind::H2p, 100), st(EventKind::Kernel, 60), st(EventKind::P2h, 100)])
            .collect();
        let s = run_pipeline(&p, SchedMode::Sync, 2).unwrap();
        let a = run_pipeline(&p, SchedMode::Async, 2).unwrap();
        // Sync: two h2p waves, kernels, two p2h waves.
        assert_eq!(s.makespan_ns, 460);
        assert!(a.makespan_ns < s.makespan_ns, "{} vs {}", a.makespan_ns, s.makespan_ns);
        let kernels: Vec<_> = a.events.iter().filter(|e| e.kind == EventKind::Kernel).collect();
        assert!(kernels.iter().any(|k| k.start_ns != kernels[0].start_ns));
        check_timeline(&a).unwrap();
    }

    #[test]
    fn big_h2p_tiny_p2h_gains_nothing() {
        let p: Vec<Vec<Stage>> = (0..8)
            .map(|_| vec![st(EventKind::H2p, 1000), st(EventKind::Kernel, 300), st(EventKind::P2h, 1)])
            .collect();
        let s = run_pipeline(&p, SchedMode::Sync, 4).unwrap();
        let a = run_pipeline(&p, SchedMode::Async, 4).unwrap();
        let gain = 1.0 - a.makespan_ns as f64 / s.makespan_ns as f64;
        assert!(gain.abs() < 0.01, "gain {gain}");
    }

    #[test]
    fn cycles_are_rejected() {
        let t = |deps: Vec<usize>| Task { kind: EventKind::Kernel, rank: Some(0), dur_ns: 1, bytes: 0, deps, phase: 0 };
        let r = schedule(&[t(vec![1]), t(vec![0])], SchedMode::Async, 1);
        assert!(matches!(r, Err(SimError::DependencyCycle(_))));
    }

    #[test]
    fn overlap_check_catches_conflicts() {
        let e = |kind, s, t| TimelineEvent { kind, rank: Some(1), start_ns: s, end_ns: t, bytes: 0 };
        let tl = Timeline { events: vec![e(EventKind::Kernel, 0, 10), e(EventKind::H2p, 5, 12)], makespan_ns: 12 };
        assert_eq!(check_timeline(&tl), Err(SimError::KernelActiveConflict { rank: 1 }));
    }

    proptest! {
        #[test]
        fn schedules_are_legal_and_async_never_slower(
            ranks in 1usize..6,
            threads in 1usize..5,
            durs in proptest::collection::vec((1u64..500, 1u64..500, 1u64..500), 6),
        ) {
            let p: Vec<Vec<Stage>> = (0..ranks)
                .map(|r| {
                    let (a, b, c) = durs[r];
                    vec![st(EventKind::H2p, a), st(EventKind::Kernel, b), st(EventKind::P2h, c)]
                })
                .collect();
            let s = run_pipeline(&p, SchedMode::Sync, threads).unwrap();
            let a = run_pipeline(&p, SchedMode::Async, threads).unwrap();
            prop_assert!(a.makespan_ns <= s.makespan_ns);
            for tl in [&s, &a] {
                for (i, x) in tl.events.iter().enumerate() {
                    for y in &tl.events[i + 1..] {
                        prop_assert!(!(x.rank == y.rank && overlaps(x, y)));
                    }
                }
                // Never more concurrent host-thread work than threads.
                for x in &tl.events {
                    let live = tl.events.iter()
                        .filter(|y| y.kind.uses_host_thread() && y.start_ns <= x.start_ns && x.start_ns < y.end_ns)
                        .count();
                    prop_assert!(live <= threads);
                }
            }
            prop_assert_eq!(run_pipeline(&p, SchedMode::Async, threads).unwrap(), a);
        }
    }
}
