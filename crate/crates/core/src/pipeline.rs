//! Cycle-stepped model of one physical core with two logical threads.
//!
//! Each cycle runs four phases in order: the frontend delivers µops into
//! each thread's IDQ, allocation moves them into the thread's half of the
//! ROB, execution is resolved (completion cycles are fixed at allocation
//! from dependencies, latency and the shared cache), and the retirement
//! arbiter hands the single retirement stage to one thread, which retires
//! up to `retire_width` completed µops from its ROB head.
//!
//! Threads are fed [`Job`]s: timed program runs, timestamp busy-waits and
//! recovery stalls. Each completed run leaves a [`JobRecord`] with its start
//! and end cycles, which is how the experiments time their loops.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::counters::CounterSet;
use crate::error::{invalid, Error, Result};
use crate::isa::{Addr, InstKind, LatencyTable, Program};
use crate::rng::{self, SimRng};
use crate::Cycle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ThreadId {
    T0,
    T1,
}

impl ThreadId {
    pub const ALL: [ThreadId; 2] = [ThreadId::T0, ThreadId::T1];

    pub fn index(self) -> usize {
        match self {
            ThreadId::T0 => 0,
            ThreadId::T1 => 1,
        }
    }

    pub fn other(self) -> ThreadId {
        match self {
            ThreadId::T0 => ThreadId::T1,
            ThreadId::T1 => ThreadId::T0,
        }
    }

    fn from_index(i: usize) -> ThreadId {
        if i == 0 {
            ThreadId::T0
        } else {
            ThreadId::T1
        }
    }
}

impl fmt::Display for ThreadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArbiterPolicy {
    /// Preferred thread alternates every cycle; an idle preferred thread
    /// hands the slot to the other one.
    #[default]
    Dynamic,
    /// Preferred thread alternates every cycle and nobody else may use it.
    Static,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetireArbiter {
    pub policy: ArbiterPolicy,
    /// Thread preferred in the current cycle.
    pub parity: u8,
    pub width: u32,
}

impl RetireArbiter {
    pub fn new(policy: ArbiterPolicy, width: u32) -> Self {
        Self { policy, parity: 0, width }
    }
}

/// Grants the retirement stage for one cycle and flips the preference.
pub fn retire_arbitrate(
    arbiter: &mut RetireArbiter,
    t0_has_retirable: bool,
    t1_has_retirable: bool,
) -> Option<ThreadId> {
    let ready = [t0_has_retirable, t1_has_retirable];
    let preferred = arbiter.parity as usize;
    let grant = if ready[preferred] {
        Some(ThreadId::from_index(preferred))
    } else if arbiter.policy == ArbiterPolicy::Dynamic && ready[1 - preferred] {
        Some(ThreadId::from_index(1 - preferred))
    } else {
        None
    };
    arbiter.parity ^= 1;
    grant
}

/// Single-level cache shared by both threads. Unbounded; lines leave only
/// by explicit flush.
#[derive(Clone, Debug, Default)]
pub struct CacheModel {
    resident: HashSet<Addr>,
    pub hit_latency: u32,
    pub miss_latency: u32,
}

impl CacheModel {
    pub fn new(hit_latency: u32, miss_latency: u32) -> Self {
        Self { resident: HashSet::new(), hit_latency, miss_latency }
    }

    pub fn is_resident(&self, addr: Addr) -> bool {
        self.resident.contains(&addr)
    }
}

/// Latency of a load; the line is resident afterwards.
pub fn cache_access(cache: &mut CacheModel, addr: Addr) -> u32 {
    if cache.resident.insert(addr) {
        cache.miss_latency
    } else {
        cache.hit_latency
    }
}

pub fn cache_flush(cache: &mut CacheModel, addr: Addr) {
    cache.resident.remove(&addr);
}

/// Background disturbance: rare interrupts that freeze a thread, and a
/// small chance that a granted retirement slot is lost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub enabled: bool,
    /// Expected interrupts per 10^6 cycles, per thread.
    pub interrupt_rate: f64,
    /// Inclusive range the freeze length is drawn from.
    pub interrupt_stall: (Cycle, Cycle),
    /// Probability that a granted retirement slot retires nothing.
    pub jitter: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::standard().disabled()
    }
}

impl NoiseModel {
    /// The noise level the experiments are evaluated under.
    pub fn standard() -> Self {
        Self { enabled: true, interrupt_rate: 1.0, interrupt_stall: (2_000, 10_000), jitter: 0.01 }
    }

    pub fn disabled(mut self) -> Self {
        self.enabled = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.interrupt_rate >= 0.0 && self.interrupt_rate.is_finite()) {
            return Err(invalid("interrupt_rate must be a non-negative number"));
        }
        if self.interrupt_stall.0 > self.interrupt_stall.1 {
            return Err(invalid("interrupt_stall range is reversed"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(invalid("jitter must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreConfig {
    pub policy: ArbiterPolicy,
    pub retire_width: u32,
    pub frontend_width: u32,
    pub alloc_width: u32,
    pub idq_capacity: usize,
    /// Whole-core ROB; each thread gets half.
    pub rob_capacity: usize,
    pub hit_latency: u32,
    pub miss_latency: u32,
    /// Latency of one timestamp poll while busy-waiting.
    pub poll_latency: u32,
    pub noise: NoiseModel,
    /// Keep a per-cycle, per-thread event log. Disables fast-forwarding.
    pub record_events: bool,
}

impl Default for CoreConfig {
    fn default() -> Self {
        Self::from_table(&LatencyTable::default())
    }
}

impl CoreConfig {
    pub fn from_table(table: &LatencyTable) -> Self {
        Self {
            policy: ArbiterPolicy::Dynamic,
            retire_width: 4,
            frontend_width: 6,
            alloc_width: 6,
            idq_capacity: 64,
            rob_capacity: 224,
            hit_latency: table.hit_latency(),
            miss_latency: table.miss_latency(),
            poll_latency: table.lookup("rdtsc").map_or(25, |e| e.exec_latency),
            noise: NoiseModel::default(),
            record_events: false,
        }
    }

    pub fn with_policy(mut self, policy: ArbiterPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_events(mut self) -> Self {
        self.record_events = true;
        self
    }

    pub fn rob_per_thread(&self) -> usize {
        self.rob_capacity / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.retire_width == 0 || self.frontend_width == 0 || self.alloc_width == 0 {
            return Err(invalid("pipeline widths must be positive"));
        }
        if self.idq_capacity < self.frontend_width as usize {
            return Err(invalid("the IDQ must hold at least one frontend line"));
        }
        if self.rob_per_thread() == 0 {
            return Err(invalid("rob_capacity must be at least 2"));
        }
        if self.poll_latency == 0 {
            return Err(invalid("poll_latency must be positive"));
        }
        self.noise.validate()
    }
}

/// Unit of work for one thread.
#[derive(Clone, Debug, PartialEq)]
pub enum Job {
    /// Execute a program; its start and end cycles are recorded under `tag`.
    Run { program: Program, tag: u64 },
    /// Spin on the timestamp counter until it reaches the given cycle.
    WaitUntil(Cycle),
    /// Request no retirement for the given number of cycles.
    Stall(Cycle),
}

impl Job {
    pub fn run(program: Program, tag: u64) -> Self {
        Job::Run { program, tag }
    }
}

/// Timing of one completed [`Job::Run`]. `end` is one past the cycle the
/// last µop retired in, so `end - start` is the measured execution time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub tag: u64,
    pub start: Cycle,
    pub end: Cycle,
}

impl JobRecord {
    pub fn duration(&self) -> Cycle {
        self.end - self.start
    }
}

/// Supplies jobs lazily when a thread's queue runs dry.
pub trait JobSource: Send {
    fn next_job(&mut self, now: Cycle) -> Option<Job>;
}

/// Why a thread did or did not retire in a cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StallReason {
    Retired,
    Idle,
    Frozen,
    Recovery,
    Stolen,
    NotGranted,
    RobEmpty,
    HeadIncomplete,
}

impl StallReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StallReason::Retired => "retired",
            StallReason::Idle => "idle",
            StallReason::Frozen => "frozen",
            StallReason::Recovery => "recovery",
            StallReason::Stolen => "stolen",
            StallReason::NotGranted => "not-granted",
            StallReason::RobEmpty => "rob-empty",
            StallReason::HeadIncomplete => "head-incomplete",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleEvent {
    pub cycle: Cycle,
    pub thread: ThreadId,
    pub granted: bool,
    pub retired: u32,
    pub reason: StallReason,
    /// Id of the first µop retired this cycle; ids count up from 0 per
    /// thread in program order.
    pub first_uop: Option<u64>,
}

pub fn write_event_log(events: &[CycleEvent], path: &Path) -> Result<()> {
    let mut out = String::from("cycle,thread,granted,retired,reason\n");
    for e in events {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.cycle,
            e.thread,
            e.granted as u8,
            e.retired,
            e.reason.as_str()
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug)]
struct Uop {
    id: u64,
    kind: InstKind,
    latency: u32,
    chain: Option<u16>,
    addr: Addr,
    /// Later µop of a multi-µop instruction; completes with its leader.
    follower: bool,
    poll: bool,
}

#[derive(Clone, Copy, Debug)]
struct RobEntry {
    id: u64,
    complete_at: Cycle,
    poll: bool,
}

#[derive(Debug)]
struct RunState {
    program: Program,
    tag: u64,
    start: Cycle,
    iter: u64,
    index: usize,
    sub: u32,
    delivered_all: bool,
    delivered: u64,
    remaining: u64,
}

#[derive(Debug)]
enum Current {
    Idle,
    Run(RunState),
    Wait { until: Cycle },
    Stall { until: Cycle },
}

struct ThreadContext {
    queue: VecDeque<Job>,
    source: Option<Box<dyn JobSource>>,
    current: Current,
    idq: VecDeque<Uop>,
    rob: VecDeque<RobEntry>,
    chain_ready: Vec<Cycle>,
    last_complete: Cycle,
    poll_pending: bool,
    poll_done: Option<Cycle>,
    next_id: u64,
    counters: CounterSet,
    records: Vec<JobRecord>,
    frozen_until: Cycle,
    next_interrupt: Cycle,
}

impl ThreadContext {
    fn new() -> Self {
        Self {
            queue: VecDeque::new(),
            source: None,
            current: Current::Idle,
            idq: VecDeque::new(),
            rob: VecDeque::new(),
            chain_ready: Vec::new(),
            last_complete: 0,
            poll_pending: false,
            poll_done: None,
            next_id: 0,
            counters: CounterSet::default(),
            records: Vec::new(),
            frozen_until: 0,
            next_interrupt: Cycle::MAX,
        }
    }

    fn has_work(&self) -> bool {
        !matches!(self.current, Current::Idle) || !self.idq.is_empty() || !self.rob.is_empty()
    }

    fn is_done(&self) -> bool {
        !self.has_work() && self.queue.is_empty() && self.source.is_none()
    }

    fn head_ready(&self, cycle: Cycle) -> bool {
        self.rob.front().is_some_and(|e| e.complete_at <= cycle)
    }

    fn poll_outstanding(&self, cycle: Cycle) -> bool {
        self.poll_pending && self.poll_done.map_or(true, |c| c > cycle)
    }
}

/// Full state of one physical core.
pub struct Core {
    cfg: CoreConfig,
    cycle: Cycle,
    threads: [ThreadContext; 2],
    arbiter: RetireArbiter,
    cache: CacheModel,
    /// Interrupt arrivals and stall lengths. Kept apart from `jitter_rng` so
    /// a seed fixes the interrupt sequence regardless of what runs.
    interrupt_rng: SimRng,
    jitter_rng: SimRng,
    interrupt_gap: Option<Exp<f64>>,
    events: Vec<CycleEvent>,
}

impl Core {
    pub fn new(cfg: CoreConfig, seed: u64) -> Self {
        let mut interrupt_rng = rng::stream(seed, 0x7e7_0001);
        let noise = &cfg.noise;
        let interrupt_gap = (noise.enabled && noise.interrupt_rate > 0.0)
            .then(|| Exp::new(noise.interrupt_rate / 1e6).expect("positive rate"));
        let mut threads = [ThreadContext::new(), ThreadContext::new()];
        if let Some(gap) = &interrupt_gap {
            for t in &mut threads {
                t.next_interrupt = gap.sample(&mut interrupt_rng).ceil() as Cycle;
            }
        }
        Self {
            arbiter: RetireArbiter::new(cfg.policy, cfg.retire_width),
            cache: CacheModel::new(cfg.hit_latency, cfg.miss_latency),
            cfg,
            cycle: 0,
            threads,
            interrupt_rng,
            jitter_rng: rng::stream(seed, 0x7e7_0002),
            interrupt_gap,
            events: Vec::new(),
        }
    }

    pub fn config(&self) -> &CoreConfig {
        &self.cfg
    }

    pub fn cycle(&self) -> Cycle {
        self.cycle
    }

    pub fn counters(&self, t: ThreadId) -> &CounterSet {
        &self.threads[t.index()].counters
    }

    pub fn records(&self, t: ThreadId) -> &[JobRecord] {
        &self.threads[t.index()].records
    }

    pub fn take_records(&mut self, t: ThreadId) -> Vec<JobRecord> {
        std::mem::take(&mut self.threads[t.index()].records)
    }

    pub fn events(&self) -> &[CycleEvent] {
        &self.events
    }

    pub fn cache(&self) -> &CacheModel {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut CacheModel {
        &mut self.cache
    }

    pub fn arbiter(&self) -> &RetireArbiter {
        &self.arbiter
    }

    pub fn push(&mut self, t: ThreadId, job: Job) {
        self.threads[t.index()].queue.push_back(job);
    }

    pub fn push_all(&mut self, t: ThreadId, jobs: impl IntoIterator<Item = Job>) {
        self.threads[t.index()].queue.extend(jobs);
    }

    pub fn set_source(&mut self, t: ThreadId, source: Box<dyn JobSource>) {
        self.threads[t.index()].source = Some(source);
    }

    /// Jobs still queued (not counting the one in progress).
    pub fn queued(&self, t: ThreadId) -> usize {
        self.threads[t.index()].queue.len()
    }

    /// True once the thread has no queued, running or in-flight work.
    pub fn is_done(&self, t: ThreadId) -> bool {
        self.threads[t.index()].is_done()
    }

    pub fn all_done(&self) -> bool {
        self.threads.iter().all(ThreadContext::is_done)
    }

    /// Advances exactly one cycle.
    pub fn step(&mut self) {
        let cycle = self.cycle;
        self.deliver_interrupts(cycle);
        let mut frontend = [false; 2];
        for i in 0..2 {
            frontend[i] = self.frontend(i, cycle);
        }
        for i in 0..2 {
            self.allocate(i, cycle);
        }
        let has_work = [self.threads[0].has_work(), self.threads[1].has_work()];
        let blocked = [self.blocked(0, cycle), self.blocked(1, cycle)];
        let ready = [
            !blocked[0] && self.threads[0].head_ready(cycle),
            !blocked[1] && self.threads[1].head_ready(cycle),
        ];
        let grant = retire_arbitrate(&mut self.arbiter, ready[0], ready[1]);
        let mut retired = [0u32; 2];
        let mut first = [None; 2];
        let mut stolen = false;
        if let Some(g) = grant {
            let noise = &self.cfg.noise;
            stolen = noise.enabled && noise.jitter > 0.0 && self.jitter_rng.gen_bool(noise.jitter);
            if !stolen {
                let i = g.index();
                first[i] = self.threads[i].rob.front().map(|e| e.id);
                retired[i] = self.retire(i, cycle);
            }
        }
        for i in 0..2 {
            let t = &mut self.threads[i];
            if frontend[i] {
                t.counters.frontend_active_cycles += 1;
            }
            if has_work[i] {
                t.counters.cycles += 1;
                if retired[i] > 0 {
                    t.counters.retire_active_cycles += 1;
                } else {
                    t.counters.retire_stall_cycles += 1;
                }
            }
            if self.cfg.record_events {
                let granted = grant.map(ThreadId::index) == Some(i);
                let reason = if retired[i] > 0 {
                    StallReason::Retired
                } else if !has_work[i] {
                    StallReason::Idle
                } else if cycle < t.frozen_until {
                    StallReason::Frozen
                } else if matches!(t.current, Current::Stall { .. }) {
                    StallReason::Recovery
                } else if granted && stolen {
                    StallReason::Stolen
                } else if ready[i] {
                    StallReason::NotGranted
                } else if t.rob.is_empty() {
                    StallReason::RobEmpty
                } else {
                    StallReason::HeadIncomplete
                };
                self.events.push(CycleEvent {
                    cycle,
                    thread: ThreadId::from_index(i),
                    granted,
                    retired: retired[i],
                    reason,
                    first_uop: first[i],
                });
            }
        }
        self.cycle += 1;
    }

    /// Steps, or skips ahead over cycles in which nothing can change.
    pub fn advance(&mut self) {
        match self.quiet_until() {
            Some(target) if target > self.cycle + 1 => self.skip_to(target),
            _ => self.step(),
        }
    }

    pub fn run_until(&mut self, stop: Cycle) {
        while self.cycle < stop {
            match self.quiet_until() {
                Some(target) if target > self.cycle + 1 => self.skip_to(target.min(stop)),
                _ => self.step(),
            }
        }
    }

    /// Runs until both threads are done or `budget` cycles have elapsed in
    /// total. Returns whether everything finished.
    pub fn run_to_completion(&mut self, budget: Cycle) -> bool {
        while !self.all_done() {
            if self.cycle >= budget {
                return false;
            }
            match self.quiet_until() {
                Some(target) if target > self.cycle + 1 => self.skip_to(target.min(budget)),
                _ => self.step(),
            }
        }
        true
    }

    /// Runs until `t` has produced at least `n` job records.
    pub fn run_until_records(&mut self, t: ThreadId, n: usize, budget: Cycle) -> bool {
        while self.threads[t.index()].records.len() < n {
            if self.cycle >= budget || self.all_done() {
                return false;
            }
            match self.quiet_until() {
                Some(target) if target > self.cycle + 1 => self.skip_to(target.min(budget)),
                _ => self.step(),
            }
        }
        true
    }

    fn blocked(&self, i: usize, cycle: Cycle) -> bool {
        let t = &self.threads[i];
        cycle < t.frozen_until || matches!(t.current, Current::Stall { until } if cycle < until)
    }

    fn deliver_interrupts(&mut self, cycle: Cycle) {
        let Some(gap) = self.interrupt_gap else { return };
        let (lo, hi) = self.cfg.noise.interrupt_stall;
        for t in &mut self.threads {
            if cycle >= t.next_interrupt {
                let stall = self.interrupt_rng.gen_range(lo..=hi);
                t.frozen_until = cycle + stall;
                t.next_interrupt = t.frozen_until + gap.sample(&mut self.interrupt_rng).ceil() as Cycle;
            }
        }
    }

    /// Job bookkeeping plus µop delivery. Returns whether any µop was
    /// delivered.
    fn frontend(&mut self, i: usize, cycle: Cycle) -> bool {
        if cycle < self.threads[i].frozen_until {
            return false;
        }
        let width = self.cfg.frontend_width as u64;
        let idq_cap = self.cfg.idq_capacity;
        let poll_latency = self.cfg.poll_latency;
        let t = &mut self.threads[i];
        loop {
            match &mut t.current {
                Current::Idle => {
                    let next = match t.queue.pop_front() {
                        Some(j) => Some(j),
                        None => match t.source.as_mut() {
                            Some(src) => {
                                let j = src.next_job(cycle);
                                if j.is_none() {
                                    t.source = None;
                                }
                                j
                            }
                            None => None,
                        },
                    };
                    match next {
                        None => return false,
                        Some(Job::Run { program, tag }) => {
                            t.chain_ready.clear();
                            t.chain_ready.resize(program.num_chains(), 0);
                            t.current = Current::Run(RunState {
                                remaining: program.uop_count(),
                                program,
                                tag,
                                start: cycle,
                                iter: 0,
                                index: 0,
                                sub: 0,
                                delivered_all: false,
                                delivered: 0,
                            });
                        }
                        Some(Job::WaitUntil(until)) => t.current = Current::Wait { until },
                        Some(Job::Stall(n)) => t.current = Current::Stall { until: cycle + n },
                    }
                }
                Current::Stall { until } => {
                    if cycle < *until {
                        return false;
                    }
                    t.current = Current::Idle;
                }
                Current::Wait { until } => {
                    let until = *until;
                    if t.poll_outstanding(cycle) {
                        return false;
                    }
                    t.poll_pending = false;
                    if cycle >= until {
                        t.current = Current::Idle;
                        continue;
                    }
                    if t.idq.len() >= idq_cap {
                        return false;
                    }
                    t.poll_pending = true;
                    t.poll_done = None;
                    let id = t.next_id;
                    t.next_id += 1;
                    t.idq.push_back(Uop {
                        id,
                        kind: InstKind::Alu,
                        latency: poll_latency,
                        chain: None,
                        addr: 0,
                        follower: false,
                        poll: true,
                    });
                    return true;
                }
                Current::Run(run) => {
                    if run.delivered_all {
                        return false;
                    }
                    let left = run.remaining_to_deliver();
                    let k = left.min(width);
                    if idq_cap - t.idq.len() < k as usize {
                        return false;
                    }
                    for _ in 0..k {
                        let inst = &run.program.body()[run.index];
                        let id = t.next_id;
                        t.next_id += 1;
                        t.idq.push_back(Uop {
                            id,
                            kind: inst.kind(),
                            latency: inst.exec_latency(),
                            chain: run.program.chain_of(run.index),
                            addr: inst.mem_addr().unwrap_or(0),
                            follower: run.sub > 0,
                            poll: false,
                        });
                        run.sub += 1;
                        run.delivered += 1;
                        if run.sub == inst.uop_count() {
                            run.sub = 0;
                            run.index += 1;
                            if run.index == run.program.body().len() {
                                run.index = 0;
                                run.iter += 1;
                            }
                        }
                    }
                    if run.delivered == run.program.uop_count() {
                        run.delivered_all = true;
                    }
                    return k > 0;
                }
            }
        }
    }

    fn allocate(&mut self, i: usize, cycle: Cycle) {
        let t = &mut self.threads[i];
        if cycle < t.frozen_until {
            return;
        }
        let cap = self.cfg.rob_capacity / 2;
        for _ in 0..self.cfg.alloc_width {
            if t.rob.len() >= cap {
                break;
            }
            let Some(u) = t.idq.pop_front() else { break };
            let complete_at = if u.follower {
                t.last_complete
            } else {
                let start = match u.chain {
                    Some(c) => cycle.max(t.chain_ready[c as usize]),
                    None => cycle,
                };
                let latency = match u.kind {
                    InstKind::Load => {
                        t.counters.cache_accesses += 1;
                        let hit = self.cache.is_resident(u.addr);
                        if !hit {
                            t.counters.cache_misses += 1;
                        }
                        cache_access(&mut self.cache, u.addr)
                    }
                    InstKind::Flush => {
                        cache_flush(&mut self.cache, u.addr);
                        u.latency
                    }
                    _ => u.latency,
                };
                let done = start + latency as Cycle;
                if let Some(c) = u.chain {
                    t.chain_ready[c as usize] = done;
                }
                done
            };
            t.last_complete = complete_at;
            if u.poll {
                t.poll_done = Some(complete_at);
            }
            t.rob.push_back(RobEntry { id: u.id, complete_at, poll: u.poll });
        }
    }

    fn retire(&mut self, i: usize, cycle: Cycle) -> u32 {
        let width = self.cfg.retire_width;
        let t = &mut self.threads[i];
        let mut n = 0;
        while n < width {
            match t.rob.front() {
                Some(e) if e.complete_at <= cycle => {
                    let e = t.rob.pop_front().expect("front exists");
                    n += 1;
                    if !e.poll {
                        if let Current::Run(run) = &mut t.current {
                            run.remaining -= 1;
                        }
                    }
                }
                _ => break,
            }
        }
        t.counters.uops_retired += n as u64;
        if let Current::Run(run) = &t.current {
            if run.delivered_all && run.remaining == 0 {
                t.records.push(JobRecord { tag: run.tag, start: run.start, end: cycle + 1 });
                t.current = Current::Idle;
            }
        }
        n
    }

    /// If nothing can happen in the current cycle, the first cycle at which
    /// something might.
    fn quiet_until(&self) -> Option<Cycle> {
        if self.cfg.record_events {
            return None;
        }
        let cycle = self.cycle;
        let mut target = Cycle::MAX;
        for t in &self.threads {
            if self.interrupt_gap.is_some() {
                if t.next_interrupt <= cycle {
                    return None;
                }
                target = target.min(t.next_interrupt);
            }
            let next = self.thread_quiet_until(t, cycle)?;
            target = target.min(next);
        }
        (target != Cycle::MAX).then_some(target)
    }

    fn thread_quiet_until(&self, t: &ThreadContext, cycle: Cycle) -> Option<Cycle> {
        let head = t.rob.front().map(|e| e.complete_at);
        if head.is_some_and(|c| c <= cycle) && cycle >= t.frozen_until {
            let stalled = matches!(t.current, Current::Stall { until } if cycle < until);
            if !stalled {
                return None;
            }
        }
        if cycle < t.frozen_until {
            return Some(t.frozen_until);
        }
        let head_or_max = head.unwrap_or(Cycle::MAX);
        match &t.current {
            Current::Idle => {
                if !t.queue.is_empty() || t.source.is_some() || !t.idq.is_empty() {
                    None
                } else {
                    Some(head_or_max)
                }
            }
            Current::Stall { until } => {
                if cycle >= *until || !t.idq.is_empty() {
                    None
                } else {
                    Some(*until)
                }
            }
            Current::Wait { .. } => {
                if !t.idq.is_empty() || !t.poll_outstanding(cycle) {
                    return None;
                }
                Some(head_or_max.min(t.poll_done?))
            }
            Current::Run(run) => {
                let k = run.remaining_to_deliver().min(self.cfg.frontend_width as u64);
                let can_deliver = !run.delivered_all && self.cfg.idq_capacity - t.idq.len() >= k as usize;
                let can_alloc = !t.idq.is_empty() && t.rob.len() < self.cfg.rob_capacity / 2;
                if can_deliver || can_alloc || head.is_none() {
                    None
                } else {
                    Some(head_or_max)
                }
            }
        }
    }

    fn skip_to(&mut self, target: Cycle) {
        let k = target - self.cycle;
        for t in &mut self.threads {
            if t.has_work() {
                t.counters.cycles += k;
                t.counters.retire_stall_cycles += k;
            }
        }
        self.arbiter.parity ^= (k & 1) as u8;
        self.cycle = target;
    }
}

impl RunState {
    fn remaining_to_deliver(&self) -> u64 {
        self.program.uop_count() - self.delivered
    }
}

/// Per-thread outcome of [`run_program`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub counters: [CounterSet; 2],
    /// Cycle one past the last retirement of each thread's program.
    pub finish: [Option<Cycle>; 2],
    pub completed: bool,
    pub events: Vec<CycleEvent>,
}

/// Runs one program per thread (or none) on a fresh core.
pub fn run_program(
    cfg: &CoreConfig,
    programs: [Option<&Program>; 2],
    budget: Cycle,
    seed: u64,
) -> Result<RunReport> {
    if budget == 0 {
        return Err(invalid("cycle budget must be positive"));
    }
    cfg.validate()?;
    let mut core = Core::new(cfg.clone(), seed);
    for (t, p) in ThreadId::ALL.into_iter().zip(programs) {
        if let Some(p) = p {
            core.push(t, Job::run(p.clone(), 0));
        }
    }
    let completed = core.run_to_completion(budget);
    let finish = ThreadId::ALL.map(|t| core.records(t).first().map(|r| r.end));
    Ok(RunReport {
        counters: ThreadId::ALL.map(|t| *core.counters(t)),
        finish,
        completed,
        events: std::mem::take(&mut core.events),
    })
}
