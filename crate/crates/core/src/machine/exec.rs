//! Deterministic tasklet scheduler.
//!
//! A kernel supplies one `async` program per tasklet. Compute is charged with
//! [`Tasklet::charge`]; every DMA, lock, handshake or barrier is an await
//! point at which the program hands control back to the scheduler.
//!
//! Dispatch is modeled in rounds. While `k` tasklets have instructions to
//! issue, a round lasts `max(k, dispatch_gap)` cycles and every one of them
//! issues exactly one instruction. This keeps IPC at or below
//! `min(1, k / dispatch_gap)` at all times.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::future::Future;
use std::pin::Pin;
use std::task::{Context, Poll, Waker};

use rayon::prelude::*;

use super::config::{InstrClass, MachineConfig};
use super::dpu::{Dpu, Mram, Wram, WramRegion};
use super::metrics::{KernelMetrics, TaskletMetrics};
use crate::error::{Result, SimError};

pub type TaskletFuture<'a> = Pin<Box<dyn Future<Output = Result<()>> + 'a>>;

/// Launch parameters visible to a kernel during setup.
#[derive(Debug, Clone, Copy)]
pub struct LaunchInfo {
    pub tasklets: usize,
    pub dpu: usize,
}

/// A program run by every tasklet of a DPU.
pub trait Kernel {
    fn name(&self) -> &'static str;

    /// Allocates scratchpad buffers before any tasklet starts.
    fn setup(&mut self, _wram: &mut Wram, _info: LaunchInfo) -> Result<()> {
        Ok(())
    }

    fn tasklet<'a>(&'a self, t: Tasklet<'a>) -> TaskletFuture<'a>;

    /// Reads results left in the scratchpad once every tasklet finished.
    fn finish(&mut self, _wram: &Wram) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Action {
    DmaRead { bytes: u64 },
    DmaWrite { bytes: u64 },
    Lock(usize),
    Unlock(usize),
    Notify,
    WaitFor(usize),
    Barrier,
    Finish,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    /// Needs to be polled once the clock reaches the given cycle.
    Ready(u64),
    /// Issuing `rem` instructions, then performs `action`.
    Compute { rem: u64, action: Action },
    BlockedLock(usize),
    Notifying,
    Waiting(usize),
    AtBarrier,
    Done,
}

#[derive(Default)]
struct Slot {
    pending: u64,
    action: Option<Action>,
}

struct Sched {
    slots: Vec<Slot>,
    class: [u64; InstrClass::COUNT],
}

struct Shared {
    mram: RefCell<Mram>,
    wram: RefCell<Wram>,
    sched: RefCell<Sched>,
    cost: [u64; InstrClass::COUNT],
    tasklets: usize,
}

/// Handle a tasklet program uses to charge work and reach the machine.
#[derive(Clone, Copy)]
pub struct Tasklet<'a> {
    id: usize,
    sh: &'a Shared,
}

/// Await point returned by every blocking tasklet operation.
#[must_use = "tasklet steps do nothing unless awaited"]
pub struct Step {
    err: Option<SimError>,
    yielded: bool,
}

impl Future for Step {
    type Output = Result<()>;
    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Result<()>> {
        if let Some(e) = self.err.take() {
            return Poll::Ready(Err(e));
        }
        if self.yielded {
            Poll::Ready(Ok(()))
        } else {
            self.yielded = true;
            Poll::Pending
        }
    }
}

impl<'a> Tasklet<'a> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Number of tasklets in this launch.
    pub fn count(&self) -> usize {
        self.sh.tasklets
    }

    /// Adds `n` operations of `class` to this tasklet's instruction stream.
    pub fn charge(&self, class: InstrClass, n: u64) {
        let instr = self.sh.cost[class.index()] * n;
        let mut s = self.sh.sched.borrow_mut();
        s.slots[self.id].pending += instr;
        s.class[class.index()] += instr;
    }

    pub fn charge_all(&self, items: &[(InstrClass, u64)]) {
        for &(c, n) in items {
            self.charge(c, n);
        }
    }

    fn step(&self, action: Action) -> Step {
        let mut s = self.sh.sched.borrow_mut();
        let slot = &mut s.slots[self.id];
        if slot.action.is_some() {
            let e = SimError::Internal(format!("tasklet {} issued two blocking steps at once", self.id));
            return Step { err: Some(e), yielded: false };
        }
        slot.action = Some(action);
        Step { err: None, yielded: false }
    }

    fn fail(e: SimError) -> Step {
        Step { err: Some(e), yielded: false }
    }

    /// DMA from bank memory into the scratchpad. The copy happens now; the
    /// tasklet resumes when the transfer completes.
    pub fn mram_read(&self, mram_addr: u64, wram_addr: u64, bytes: u64) -> Step {
        let r = (|| {
            let mram = self.sh.mram.borrow();
            mram.check(mram_addr, bytes)?;
            let mut wram = self.sh.wram.borrow_mut();
            wram.check_span(wram_addr, bytes)?;
            mram.read(mram_addr, wram.raw_span_mut(wram_addr, bytes))
        })();
        match r {
            Ok(()) => self.step(Action::DmaRead { bytes }),
            Err(e) => Self::fail(e),
        }
    }

    /// DMA from the scratchpad into bank memory.
    pub fn mram_write(&self, wram_addr: u64, mram_addr: u64, bytes: u64) -> Step {
        let r = (|| {
            let mut mram = self.sh.mram.borrow_mut();
            mram.check(mram_addr, bytes)?;
            let wram = self.sh.wram.borrow();
            wram.check_span(wram_addr, bytes)?;
            mram.write(mram_addr, wram.raw_span(wram_addr, bytes))
        })();
        match r {
            Ok(()) => self.step(Action::DmaWrite { bytes }),
            Err(e) => Self::fail(e),
        }
    }

    /// Reads `words` words from bank memory into `region` starting at word `at`.
    pub fn load(&self, mram_addr: u64, region: WramRegion, at: usize, words: usize) -> Step {
        if at + words > region.words() {
            return Self::fail(SimError::OutOfBounds(format!("load of {words} words at {at} overruns region")));
        }
        self.mram_read(mram_addr, region.addr(at), words as u64 * 8)
    }

    /// Writes `words` words of `region` starting at word `at` to bank memory.
    pub fn store(&self, region: WramRegion, at: usize, words: usize, mram_addr: u64) -> Step {
        if at + words > region.words() {
            return Self::fail(SimError::OutOfBounds(format!("store of {words} words at {at} overruns region")));
        }
        self.mram_write(region.addr(at), mram_addr, words as u64 * 8)
    }

    pub fn lock(&self, mutex: usize) -> Step {
        self.step(Action::Lock(mutex))
    }

    pub fn unlock(&self, mutex: usize) -> Step {
        self.step(Action::Unlock(mutex))
    }

    /// Blocks until some tasklet waits for this one.
    pub fn notify(&self) -> Step {
        self.step(Action::Notify)
    }

    /// Blocks until `notifier` notifies.
    pub fn wait_for(&self, notifier: usize) -> Step {
        if notifier == self.id || notifier >= self.sh.tasklets {
            return Self::fail(SimError::Internal(format!(
                "tasklet {} cannot wait for tasklet {notifier}",
                self.id
            )));
        }
        self.step(Action::WaitFor(notifier))
    }

    /// Blocks until every tasklet of the launch reaches a barrier.
    pub fn barrier(&self) -> Step {
        self.step(Action::Barrier)
    }

    /// Scratchpad access. Charges nothing; callers charge loads and stores.
    pub fn wram<R>(&self, f: impl FnOnce(&mut Wram) -> R) -> R {
        f(&mut self.sh.wram.borrow_mut())
    }

    pub fn ld(&self, r: WramRegion, i: usize) -> u64 {
        self.sh.wram.borrow().get(r, i)
    }

    pub fn st(&self, r: WramRegion, i: usize, v: u64) {
        self.sh.wram.borrow_mut().set(r, i, v)
    }
}

#[derive(Default)]
struct MutexState {
    owner: Option<usize>,
    waiters: VecDeque<usize>,
}

struct Engine<'k> {
    kernel: &'k str,
    dpu: usize,
    gap: u64,
    alpha: f64,
    beta: u64,
    now: u64,
    dma_free: u64,
    status: Vec<Status>,
    blocked_since: Vec<u64>,
    mutexes: Vec<MutexState>,
    barrier: Vec<usize>,
    m: KernelMetrics,
}

impl Engine<'_> {
    fn release(&mut self, t: usize, at: u64, sync: bool) {
        let waited = at - self.blocked_since[t];
        if sync {
            self.m.per_tasklet[t].sync_wait_cycles += waited;
        } else {
            self.m.per_tasklet[t].dma_wait_cycles += waited;
        }
        self.status[t] = Status::Ready(at);
    }

    fn perform(&mut self, t: usize, action: Action) -> Result<()> {
        let now = self.now;
        self.blocked_since[t] = now;
        match action {
            Action::DmaRead { bytes } | Action::DmaWrite { bytes } => {
                let start = now.max(self.dma_free);
                let end = start + self.beta + (self.alpha * bytes as f64).ceil() as u64;
                self.dma_free = end;
                self.m.dma_jobs += 1;
                if matches!(action, Action::DmaRead { .. }) {
                    self.m.dma_read_bytes += bytes;
                } else {
                    self.m.dma_write_bytes += bytes;
                }
                self.release(t, end, false);
            }
            Action::Lock(id) => {
                if self.mutexes.len() <= id {
                    self.mutexes.resize_with(id + 1, MutexState::default);
                }
                let mx = &mut self.mutexes[id];
                if mx.owner.is_none() {
                    mx.owner = Some(t);
                    self.status[t] = Status::Ready(now);
                } else {
                    mx.waiters.push_back(t);
                    self.status[t] = Status::BlockedLock(id);
                }
            }
            Action::Unlock(id) => {
                let held = self.mutexes.get(id).and_then(|m| m.owner) == Some(t);
                if !held {
                    return Err(SimError::UnlockNotHeld { tasklet: t, mutex: id });
                }
                let next = self.mutexes[id].waiters.pop_front();
                self.mutexes[id].owner = next;
                if let Some(w) = next {
                    self.release(w, now, true);
                }
                self.status[t] = Status::Ready(now);
            }
            Action::Notify => {
                let waiter = (0..self.status.len()).find(|&w| self.status[w] == Status::Waiting(t));
                match waiter {
                    Some(w) => {
                        self.release(w, now + 1, true);
                        self.release(t, now + 1, true);
                    }
                    None => self.status[t] = Status::Notifying,
                }
            }
            Action::WaitFor(n) => {
                if self.status[n] == Status::Notifying {
                    self.release(n, now + 1, true);
                    self.release(t, now + 1, true);
                } else {
                    self.status[t] = Status::Waiting(n);
                }
            }
            Action::Barrier => {
                self.barrier.push(t);
                self.status[t] = Status::AtBarrier;
                if self.barrier.len() == self.status.len() {
                    for w in std::mem::take(&mut self.barrier) {
                        self.release(w, now + 1, true);
                    }
                }
            }
            Action::Finish => {
                self.status[t] = Status::Done;
                self.m.per_tasklet[t].finish_cycle = now;
            }
        }
        Ok(())
    }

    fn deadlock(&self) -> SimError {
        let detail = self
            .status
            .iter()
            .enumerate()
            .filter(|(_, s)| **s != Status::Done)
            .map(|(i, s)| format!("t{i}:{s:?}"))
            .collect::<Vec<_>>()
            .join(" ");
        SimError::Deadlock { kernel: self.kernel.to_string(), dpu: self.dpu, detail }
    }
}

/// Runs `kernel` with `tasklets` tasklets on one DPU.
pub fn run_on_dpu<K: Kernel>(
    cfg: &MachineConfig,
    dpu: &mut Dpu,
    tasklets: usize,
    mut kernel: K,
) -> Result<(K, KernelMetrics)> {
    if tasklets == 0 || tasklets > cfg.max_tasklets {
        return Err(SimError::TaskletCount(tasklets));
    }
    dpu.wram.reset(cfg.wram_budget(tasklets));
    let info = LaunchInfo { tasklets, dpu: dpu.id };
    kernel.setup(&mut dpu.wram, info)?;

    let sh = Shared {
        mram: RefCell::new(std::mem::take(&mut dpu.mram)),
        wram: RefCell::new(std::mem::take(&mut dpu.wram)),
        sched: RefCell::new(Sched {
            slots: (0..tasklets).map(|_| Slot::default()).collect(),
            class: [0; InstrClass::COUNT],
        }),
        cost: cfg.instr_cost.to_array(),
        tasklets,
    };
    let result = drive(cfg, dpu.id, &kernel, &sh, tasklets);
    dpu.mram = sh.mram.into_inner();
    dpu.wram = sh.wram.into_inner();
    let mut metrics = result?;
    metrics.class_instructions = sh.sched.into_inner().class;
    kernel.finish(&dpu.wram)?;
    metrics.kernel = kernel.name().to_string();
    Ok((kernel, metrics))
}

fn drive<K: Kernel>(cfg: &MachineConfig, dpu: usize, kernel: &K, sh: &Shared, n: usize) -> Result<KernelMetrics> {
    let mut futures: Vec<Option<TaskletFuture<'_>>> =
        (0..n).map(|id| Some(kernel.tasklet(Tasklet { id, sh }))).collect();
    let mut cx = Context::from_waker(Waker::noop());
    let cost = cfg.instr_cost.to_array();
    let mut e = Engine {
        kernel: kernel.name(),
        dpu,
        gap: cfg.dispatch_gap,
        alpha: cfg.dma_alpha,
        beta: cfg.dma_beta,
        now: 0,
        dma_free: 0,
        status: vec![Status::Ready(0); n],
        blocked_since: vec![0; n],
        mutexes: Vec::new(),
        barrier: Vec::new(),
        m: KernelMetrics {
            dpu,
            tasklets: n,
            per_tasklet: vec![TaskletMetrics::default(); n],
            ..Default::default()
        },
    };
    let mut active: Vec<usize> = Vec::with_capacity(n);
    loop {
        for t in 0..n {
            let Status::Ready(at) = e.status[t] else { continue };
            if at > e.now {
                continue;
            }
            let fut = futures[t].as_mut().expect("ready tasklet has a program");
            let poll = fut.as_mut().poll(&mut cx);
            let mut s = sh.sched.borrow_mut();
            let slot = &mut s.slots[t];
            let pending = std::mem::take(&mut slot.pending);
            let action = slot.action.take();
            drop(s);
            match poll {
                Poll::Ready(Err(err)) => return Err(err),
                Poll::Ready(Ok(())) => {
                    futures[t] = None;
                    if action.is_some() {
                        return Err(SimError::Internal(format!("tasklet {t} finished with an unawaited step")));
                    }
                    if pending == 0 {
                        e.perform(t, Action::Finish)?;
                    } else {
                        e.status[t] = Status::Compute { rem: pending, action: Action::Finish };
                    }
                }
                Poll::Pending => {
                    let Some(action) = action else {
                        return Err(SimError::Internal(format!("tasklet {t} yielded without a step")));
                    };
                    let class = match action {
                        Action::DmaRead { .. } | Action::DmaWrite { .. } => InstrClass::Dma,
                        _ => InstrClass::Sync,
                    };
                    let extra = cost[class.index()];
                    sh.sched.borrow_mut().class[class.index()] += extra;
                    let rem = pending + extra;
                    if rem == 0 {
                        e.perform(t, action)?;
                    } else {
                        e.status[t] = Status::Compute { rem, action };
                    }
                }
            }
        }

        active.clear();
        active.extend((0..n).filter(|&t| matches!(e.status[t], Status::Compute { .. })));
        let next_event = e
            .status
            .iter()
            .filter_map(|s| match s {
                Status::Ready(at) => Some(*at),
                _ => None,
            })
            .min();
        if active.is_empty() {
            match next_event {
                Some(at) => {
                    e.now = e.now.max(at);
                    continue;
                }
                None if e.status.iter().all(|s| *s == Status::Done) => break,
                None => return Err(e.deadlock()),
            }
        }
        let k = active.len() as u64;
        let round = k.max(e.gap);
        let min_rem = active
            .iter()
            .map(|&t| match e.status[t] {
                Status::Compute { rem, .. } => rem,
                _ => unreachable!(),
            })
            .min()
            .expect("active set is nonempty");
        let mut rounds = min_rem;
        if let Some(at) = next_event {
            let until = at.saturating_sub(e.now).div_ceil(round).max(1);
            rounds = rounds.min(until);
        }
        e.now += rounds * round;
        e.m.instructions += rounds * k;
        for &t in &active {
            e.m.per_tasklet[t].instructions += rounds;
            let Status::Compute { rem, action } = e.status[t] else { unreachable!() };
            if rem == rounds {
                e.perform(t, action)?;
            } else {
                e.status[t] = Status::Compute { rem: rem - rounds, action };
            }
        }
    }
    e.m.cycles = e.now;
    e.m.ipc = if e.now == 0 { 0.0 } else { e.m.instructions as f64 / e.now as f64 };
    Ok(e.m)
}

/// Runs one kernel per DPU in `dpus`, built by `make(index, dpu)`. DPUs are
/// simulated in parallel; results come back in slice order and the first
/// failing DPU (by index) determines the error.
pub fn run_kernel<K, F>(
    cfg: &MachineConfig,
    dpus: &mut [Dpu],
    tasklets: usize,
    make: F,
) -> Result<Vec<(K, KernelMetrics)>>
where
    K: Kernel + Send,
    F: Fn(usize, &Dpu) -> Result<K> + Sync,
{
    let results: Vec<Result<(K, KernelMetrics)>> = dpus
        .par_iter_mut()
        .enumerate()
        .map(|(i, dpu)| {
            let k = make(i, dpu)?;
            run_on_dpu(cfg, dpu, tasklets, k)
        })
        .collect();
    results.into_iter().collect()
}
