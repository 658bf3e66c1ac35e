//! Brute-force reference model of the two-thread core with noise off.
//!
//! Every µop of every job is unrolled into one flat table per thread before
//! the run starts. Each cycle rescans the tables to find the IDQ, the ROB and
//! its head; nothing is carried between cycles except per-µop stage, the
//! cache contents and the arbiter parity.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use retsim::counters::CounterSet;
use retsim::isa::{InstKind, InstructionSpec, LatencyTable, Program};
use retsim::pipeline::{ArbiterPolicy, CoreConfig, CycleEvent, Job, JobRecord, StallReason, ThreadId};
use retsim::rng::SimRng;

#[derive(Clone, Debug)]
pub enum RefJob {
    Run(Program, u64),
    Stall(u64),
}

impl RefJob {
    pub fn to_job(&self) -> Job {
        match self {
            RefJob::Run(p, tag) => Job::run(p.clone(), *tag),
            RefJob::Stall(n) => Job::Stall(*n),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Stage {
    Pending,
    Queued,
    InFlight(u64),
    Retired,
}

#[derive(Clone, Debug)]
struct RefUop {
    job: usize,
    kind: InstKind,
    latency: u64,
    serial_name: Option<String>,
    addr: u64,
    follower: bool,
    stage: Stage,
}

struct RefThread {
    jobs: Vec<RefJob>,
    uops: Vec<RefUop>,
    next_job: usize,
    current: Option<usize>,
    start: u64,
    stall_until: u64,
    chain_ready: HashMap<(usize, String), u64>,
    last_complete: u64,
    counters: CounterSet,
    records: Vec<JobRecord>,
}

impl RefThread {
    fn new(jobs: Vec<RefJob>) -> Self {
        let mut uops = Vec::new();
        for (j, job) in jobs.iter().enumerate() {
            if let RefJob::Run(p, _) = job {
                for inst in p.iter() {
                    for s in 0..inst.uop_count() {
                        uops.push(RefUop {
                            job: j,
                            kind: inst.kind(),
                            latency: inst.exec_latency() as u64,
                            serial_name: inst.serial().then(|| inst.name().to_string()),
                            addr: inst.mem_addr().unwrap_or(0),
                            follower: s > 0,
                            stage: Stage::Pending,
                        });
                    }
                }
            }
        }
        Self {
            jobs,
            uops,
            next_job: 0,
            current: None,
            start: 0,
            stall_until: 0,
            chain_ready: HashMap::new(),
            last_complete: 0,
            counters: CounterSet::default(),
            records: Vec::new(),
        }
    }

    fn count(&self, pred: impl Fn(Stage) -> bool) -> usize {
        self.uops.iter().filter(|u| pred(u.stage)).count()
    }

    fn in_idq(&self) -> usize {
        self.count(|s| s == Stage::Queued)
    }

    fn in_rob(&self) -> usize {
        self.count(|s| matches!(s, Stage::InFlight(_)))
    }

    fn head(&self) -> Option<(usize, u64)> {
        self.uops.iter().enumerate().find_map(|(i, u)| match u.stage {
            Stage::InFlight(c) => Some((i, c)),
            _ => None,
        })
    }

    fn in_stall(&self) -> bool {
        matches!(self.current.map(|j| &self.jobs[j]), Some(RefJob::Stall(_)))
    }

    fn has_work(&self) -> bool {
        self.current.is_some() || self.in_idq() > 0 || self.in_rob() > 0
    }

    fn done(&self) -> bool {
        self.next_job == self.jobs.len() && !self.has_work()
    }
}

pub struct RefResult {
    pub counters: [CounterSet; 2],
    pub records: [Vec<JobRecord>; 2],
    pub events: Vec<CycleEvent>,
    pub finished: bool,
}

pub fn reference_run(cfg: &CoreConfig, jobs: [Vec<RefJob>; 2], budget: u64) -> RefResult {
    assert!(!cfg.noise.enabled, "the reference model has no noise");
    let [a, b] = jobs;
    let mut th = [RefThread::new(a), RefThread::new(b)];
    let mut resident: BTreeSet<u64> = BTreeSet::new();
    let mut parity = 0usize;
    let mut events = Vec::new();
    let mut cycle = 0u64;
    let rob_cap = cfg.rob_capacity / 2;

    while !(th[0].done() && th[1].done()) {
        if cycle >= budget {
            return RefResult {
                counters: [th[0].counters, th[1].counters],
                records: [th[0].records.clone(), th[1].records.clone()],
                events,
                finished: false,
            };
        }

        // frontend
        let mut fe = [false; 2];
        for (i, t) in th.iter_mut().enumerate() {
            fe[i] = loop {
                match t.current {
                    None => {
                        if t.next_job == t.jobs.len() {
                            break false;
                        }
                        let j = t.next_job;
                        t.next_job += 1;
                        t.current = Some(j);
                        match t.jobs[j] {
                            RefJob::Stall(n) => t.stall_until = cycle + n,
                            RefJob::Run(..) => t.start = cycle,
                        }
                    }
                    Some(j) => match t.jobs[j] {
                        RefJob::Stall(_) => {
                            if cycle < t.stall_until {
                                break false;
                            }
                            t.current = None;
                        }
                        RefJob::Run(..) => {
                            let pending: Vec<usize> = (0..t.uops.len())
                                .filter(|&k| t.uops[k].job == j && t.uops[k].stage == Stage::Pending)
                                .collect();
                            if pending.is_empty() {
                                break false;
                            }
                            let n = pending.len().min(cfg.frontend_width as usize);
                            if cfg.idq_capacity - t.in_idq() < n {
                                break false;
                            }
                            for &k in &pending[..n] {
                                t.uops[k].stage = Stage::Queued;
                            }
                            break true;
                        }
                    },
                }
            };
        }

        // allocate
        for t in th.iter_mut() {
            for _ in 0..cfg.alloc_width {
                if t.in_rob() >= rob_cap {
                    break;
                }
                let Some(k) = t.uops.iter().position(|u| u.stage == Stage::Queued) else { break };
                let u = t.uops[k].clone();
                let done = if u.follower {
                    t.last_complete
                } else {
                    let key = u.serial_name.clone().map(|n| (u.job, n));
                    let begin = key.as_ref().map_or(cycle, |k| cycle.max(*t.chain_ready.get(k).unwrap_or(&0)));
                    let lat = match u.kind {
                        InstKind::Load => {
                            t.counters.cache_accesses += 1;
                            if resident.insert(u.addr) {
                                t.counters.cache_misses += 1;
                                cfg.miss_latency as u64
                            } else {
                                cfg.hit_latency as u64
                            }
                        }
                        InstKind::Flush => {
                            resident.remove(&u.addr);
                            u.latency
                        }
                        _ => u.latency,
                    };
                    if let Some(k) = key {
                        t.chain_ready.insert(k, begin + lat);
                    }
                    begin + lat
                };
                t.last_complete = done;
                t.uops[k].stage = Stage::InFlight(done);
            }
        }

        // retire
        let has_work = [th[0].has_work(), th[1].has_work()];
        let ready: Vec<bool> = th
            .iter()
            .map(|t| {
                let blocked = t.in_stall() && cycle < t.stall_until;
                !blocked && t.head().is_some_and(|(_, c)| c <= cycle)
            })
            .collect();
        let grant = if ready[parity] {
            Some(parity)
        } else if cfg.policy == ArbiterPolicy::Dynamic && ready[1 - parity] {
            Some(1 - parity)
        } else {
            None
        };
        parity = 1 - parity;
        let mut retired = [0u32; 2];
        let mut first = [None; 2];
        if let Some(g) = grant {
            let t = &mut th[g];
            while retired[g] < cfg.retire_width {
                match t.head() {
                    Some((k, c)) if c <= cycle => {
                        if retired[g] == 0 {
                            first[g] = Some(k as u64);
                        }
                        t.uops[k].stage = Stage::Retired;
                        retired[g] += 1;
                    }
                    _ => break,
                }
            }
            t.counters.uops_retired += retired[g] as u64;
            if let Some(j) = t.current {
                let all = t.uops.iter().filter(|u| u.job == j).all(|u| u.stage == Stage::Retired);
                if matches!(t.jobs[j], RefJob::Run(..)) && all {
                    let RefJob::Run(_, tag) = t.jobs[j] else { unreachable!() };
                    t.records.push(JobRecord { tag, start: t.start, end: cycle + 1 });
                    t.current = None;
                }
            }
        }

        for (i, t) in th.iter_mut().enumerate() {
            if fe[i] {
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
            let reason = if retired[i] > 0 {
                StallReason::Retired
            } else if !has_work[i] {
                StallReason::Idle
            } else if t.in_stall() {
                StallReason::Recovery
            } else if ready[i] {
                StallReason::NotGranted
            } else if t.in_rob() == 0 {
                StallReason::RobEmpty
            } else {
                StallReason::HeadIncomplete
            };
            events.push(CycleEvent {
                cycle,
                thread: ThreadId::ALL[i],
                granted: grant == Some(i),
                retired: retired[i],
                reason,
                first_uop: first[i],
            });
        }
        cycle += 1;
    }
    RefResult {
        counters: [th[0].counters, th[1].counters],
        records: [th[0].records.clone(), th[1].records.clone()],
        events,
        finished: true,
    }
}

/// Random looped program of at most `max_uops` µops drawn from the default
/// table plus a multi-µop instruction, over a small shared set of lines.
pub fn random_program(rng: &mut SimRng, max_uops: u64) -> Program {
    let table = LatencyTable::default();
    let names = ["nop", "add", "adc", "xchg", "mfence", "load", "load-miss", "flush", "dec", "jnz", "rdtsc"];
    let len = rng.gen_range(1..=12);
    let body: Vec<InstructionSpec> = (0..len)
        .map(|_| {
            if rng.gen_bool(0.1) {
                let uops = rng.gen_range(2..=4);
                let lat = rng.gen_range(1..=12);
                let serial = rng.gen_bool(0.5);
                InstructionSpec::new("multi", InstKind::Alu, uops, lat, serial, None).unwrap()
            } else {
                let name = names[rng.gen_range(0..names.len())];
                let addr = table.lookup(name).unwrap().kind.is_memory().then(|| rng.gen_range(0..8u64) * 64);
                table.instruction(name, addr).unwrap()
            }
        })
        .collect();
    let per_iter: u64 = body.iter().map(|i| i.uop_count() as u64).sum();
    let max_iters = (max_uops / per_iter).max(1);
    let iters = rng.gen_range(1..=max_iters);
    let body = if per_iter > max_uops { body[..1].to_vec() } else { body };
    Program::looped("random", body, iters).unwrap()
}

/// One to three jobs: mostly programs, occasionally a recovery stall.
pub fn random_jobs(rng: &mut SimRng, max_uops: u64) -> Vec<RefJob> {
    (0..rng.gen_range(1..=3))
        .map(|k| {
            if rng.gen_bool(0.15) {
                RefJob::Stall(rng.gen_range(0..60))
            } else {
                RefJob::Run(random_program(rng, max_uops), k)
            }
        })
        .collect()
}
