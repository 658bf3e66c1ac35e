//! Performance-counter view of a simulated core: per-thread counter sets,
//! the timestamp counter, and windowed retirement-usage series.

use std::io::Write;
use std::ops::AddAssign;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::pipeline::{Core, ThreadId};
use crate::Cycle;

/// Per-thread event counts.
///
/// `cycles` counts cycles in which the thread had work (a job, or µops in
/// flight). Every such cycle is either retire-active (≥ 1 µop retired) or a
/// retire stall, so `retire_active_cycles + retire_stall_cycles == cycles`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSet {
    pub cycles: u64,
    pub uops_retired: u64,
    pub retire_active_cycles: u64,
    pub retire_stall_cycles: u64,
    pub frontend_active_cycles: u64,
    pub cache_accesses: u64,
    pub cache_misses: u64,
}

impl CounterSet {
    /// Retire-active cycles over cycles with work.
    pub fn retirement_usage(&self) -> f64 {
        ratio(self.retire_active_cycles, self.cycles)
    }

    /// Retire-stall cycles over cycles with work.
    pub fn stall_ratio(&self) -> f64 {
        ratio(self.retire_stall_cycles, self.cycles)
    }

    pub fn miss_rate(&self) -> f64 {
        ratio(self.cache_misses, self.cache_accesses)
    }

    fn fields(&self) -> [u64; 7] {
        [
            self.cycles,
            self.uops_retired,
            self.retire_active_cycles,
            self.retire_stall_cycles,
            self.frontend_active_cycles,
            self.cache_accesses,
            self.cache_misses,
        ]
    }

    pub const CSV_HEADER: &'static str = "cycles,uops_retired,retire_active_cycles,retire_stall_cycles,frontend_active_cycles,cache_accesses,cache_misses";

    pub fn csv_row(&self) -> String {
        self.fields().iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    }
}

impl AddAssign for CounterSet {
    fn add_assign(&mut self, o: Self) {
        self.cycles += o.cycles;
        self.uops_retired += o.uops_retired;
        self.retire_active_cycles += o.retire_active_cycles;
        self.retire_stall_cycles += o.retire_stall_cycles;
        self.frontend_active_cycles += o.frontend_active_cycles;
        self.cache_accesses += o.cache_accesses;
        self.cache_misses += o.cache_misses;
    }
}

fn ratio(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// A counter snapshot tagged with the cycle it was taken at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub at: Cycle,
    pub counters: CounterSet,
}

/// The simulated `rdtsc`.
pub fn timestamp(core: &Core) -> Cycle {
    core.cycle()
}

pub fn snapshot(core: &Core, thread: ThreadId) -> Snapshot {
    Snapshot { at: core.cycle(), counters: *core.counters(thread) }
}

/// Field-wise `b - a`; `b` must not predate `a`.
pub fn delta(a: &Snapshot, b: &Snapshot) -> Result<CounterSet> {
    if b.at < a.at {
        return Err(invalid(format!("snapshot at {} precedes snapshot at {}", b.at, a.at)));
    }
    let (x, y) = (a.counters, b.counters);
    let sub = |p: u64, q: u64| {
        q.checked_sub(p).ok_or_else(|| invalid("snapshots are not from the same run"))
    };
    Ok(CounterSet {
        cycles: sub(x.cycles, y.cycles)?,
        uops_retired: sub(x.uops_retired, y.uops_retired)?,
        retire_active_cycles: sub(x.retire_active_cycles, y.retire_active_cycles)?,
        retire_stall_cycles: sub(x.retire_stall_cycles, y.retire_stall_cycles)?,
        frontend_active_cycles: sub(x.frontend_active_cycles, y.frontend_active_cycles)?,
        cache_accesses: sub(x.cache_accesses, y.cache_accesses)?,
        cache_misses: sub(x.cache_misses, y.cache_misses)?,
    })
}

/// Retirement usage sampled every `window` cycles.
#[derive(Clone, Debug, PartialEq)]
pub struct UsageSeries {
    pub start: Cycle,
    pub window: Cycle,
    pub values: Vec<f64>,
}

impl UsageSeries {
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// `cycle,value` rows, one per window, keyed by the window's first cycle.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("cycle,value\n");
        for (i, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{},{:.6}\n", self.start + i as u64 * self.window, v));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Advances `core` by `duration` cycles and records, per full window, the
/// fraction of cycles in which `thread` retired at least one µop.
pub fn usage_series(
    core: &mut Core,
    thread: ThreadId,
    window: Cycle,
    duration: Cycle,
) -> Result<UsageSeries> {
    if window == 0 {
        return Err(invalid("window must be at least one cycle"));
    }
    if window > duration {
        return Err(invalid(format!("window {window} exceeds duration {duration}")));
    }
    let start = core.cycle();
    let mut values = Vec::with_capacity((duration / window) as usize);
    let mut prev = snapshot(core, thread);
    for _ in 0..duration / window {
        core.run_until(prev.at + window);
        let now = snapshot(core, thread);
        let d = delta(&prev, &now)?;
        values.push(d.retire_active_cycles as f64 / window as f64);
        prev = now;
    }
    Ok(UsageSeries { start, window, values })
}
