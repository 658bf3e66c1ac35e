//! Retirement-contention covert channels.
//!
//! A sender on one thread and a receiver on the other agree on a start
//! time, then share fixed-length slots. In each slot the sender runs the
//! loop that encodes the current symbol while the receiver times one
//! nop-loop; how much retirement bandwidth the sender leaves over decides
//! the receiver's time, which is mapped back to a symbol through per-symbol
//! execution-time ranges (ETRs).
//!
//! * DI: four different loops (nop, add, adc, xchg), two bits per slot.
//! * SI: one flush-load loop whose loads either hit or miss, one bit per slot.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::isa::{
    build_flush_load_loop, build_nop_loop, build_serial_loop, build_touch, LatencyTable, LineSet,
    Program, LOAD_REGION,
};
use crate::pipeline::{Core, CoreConfig, Job, JobRecord, NoiseModel, ThreadId};
use crate::rng;
use crate::{Cycle, DEFAULT_FREQUENCY_HZ};

pub type Symbol = u8;

pub const SENDER: ThreadId = ThreadId::T0;
pub const RECEIVER: ThreadId = ThreadId::T1;

/// DI symbol order: 00, 01, 10, 11.
pub const DI_INSTRUCTIONS: [&str; 4] = ["nop", "add", "adc", "xchg"];

const PROLOGUE_TAG: u64 = u64::MAX;
/// Fraction of samples dropped from each end of a symbol's distribution.
pub const ETR_TRIM: f64 = 0.05;
/// Largest tolerated overlap between two ETRs, relative to their union.
pub const MAX_OVERLAP: f64 = 0.25;

/// Default DI sender length: each symbol's loop runs about as long as an
/// xchg-loop of this many iterations does alone.
pub const DI_SENDER_XCHG_ITERATIONS: u64 = 350;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Di,
    Si,
}

impl Variant {
    /// Bits per symbol.
    pub fn len(self) -> u32 {
        match self {
            Variant::Di => 2,
            Variant::Si => 1,
        }
    }

    pub fn alphabet(self) -> usize {
        1 << self.len()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Di => "di",
            Variant::Si => "si",
        }
    }
}

/// First slot boundary at least one full `rt` after `tsc`.
pub fn compute_time_start(tsc: Cycle, rt: Cycle) -> Result<Cycle> {
    if rt == 0 {
        return Err(invalid("reserved time must be positive"));
    }
    Ok(tsc - tsc % rt + 2 * rt)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EtrRange {
    pub symbol: Symbol,
    pub lo: Cycle,
    pub hi: Cycle,
}

impl EtrRange {
    fn distance(&self, t: Cycle) -> Cycle {
        if t < self.lo {
            self.lo - t
        } else {
            t.saturating_sub(self.hi)
        }
    }
}

/// Disjoint closed execution-time ranges, one per symbol, sorted by time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Etr {
    ranges: Vec<EtrRange>,
}

impl Etr {
    pub fn from_ranges(mut ranges: Vec<EtrRange>) -> Result<Self> {
        ranges.sort_by_key(|r| (r.lo, r.symbol));
        for r in &ranges {
            if r.lo > r.hi {
                return Err(invalid(format!("ETR for symbol {} is reversed", r.symbol)));
            }
        }
        for w in ranges.windows(2) {
            if w[0].hi >= w[1].lo {
                return Err(invalid(format!(
                    "ETRs for symbols {} and {} overlap",
                    w[0].symbol, w[1].symbol
                )));
            }
        }
        let mut seen: Vec<Symbol> = ranges.iter().map(|r| r.symbol).collect();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != ranges.len() {
            return Err(invalid("duplicate symbol in ETR"));
        }
        Ok(Self { ranges })
    }

    /// Builds ranges from per-symbol time samples: trimmed quantile ranges,
    /// adjacent overlaps split at the midpoint.
    pub fn from_samples(samples: &[Vec<Cycle>], trim: f64) -> Result<Self> {
        let mut ranges = Vec::with_capacity(samples.len());
        let mut medians = Vec::with_capacity(samples.len());
        for (symbol, s) in samples.iter().enumerate() {
            if s.is_empty() {
                return Err(invalid(format!("no samples for symbol {symbol}")));
            }
            let mut v = s.clone();
            v.sort_unstable();
            let last = (v.len() - 1) as f64;
            let lo = v[(trim * last).floor() as usize];
            let hi = v[((1.0 - trim) * last).ceil() as usize];
            ranges.push(EtrRange { symbol: symbol as Symbol, lo, hi });
            medians.push(v[v.len() / 2]);
        }
        let mut order: Vec<usize> = (0..ranges.len()).collect();
        order.sort_by_key(|&i| (medians[i], i));
        let mut sorted: Vec<EtrRange> = order.iter().map(|&i| ranges[i]).collect();
        for i in 1..sorted.len() {
            let (a, b) = (sorted[i - 1], sorted[i]);
            if medians[order[i - 1]] == medians[order[i]] {
                return Err(Error::CalibrationFailure(format!(
                    "symbols {} and {} have the same median time",
                    a.symbol, b.symbol
                )));
            }
            let overlap = a.hi.min(b.hi) as f64 - a.lo.max(b.lo) as f64;
            if overlap >= 0.0 {
                let union = (a.hi.max(b.hi) - a.lo.min(b.lo)) as f64;
                if union == 0.0 || overlap / union > MAX_OVERLAP {
                    return Err(Error::CalibrationFailure(format!(
                        "symbols {} [{}, {}] and {} [{}, {}] are not separable",
                        a.symbol, a.lo, a.hi, b.symbol, b.lo, b.hi
                    )));
                }
                let mid = (a.hi.min(b.hi) + a.lo.max(b.lo)) / 2;
                sorted[i - 1].hi = mid.max(a.lo);
                sorted[i].lo = (mid + 1).min(b.hi.max(mid + 1));
                sorted[i].hi = sorted[i].hi.max(sorted[i].lo);
            }
        }
        Self::from_ranges(sorted)
    }

    pub fn ranges(&self) -> &[EtrRange] {
        &self.ranges
    }

    pub fn range(&self, symbol: Symbol) -> Option<&EtrRange> {
        self.ranges.iter().find(|r| r.symbol == symbol)
    }

    /// Symbol whose range contains `t`, else the nearest range; equal
    /// distances go to the lower symbol.
    pub fn decode(&self, t: Cycle) -> Symbol {
        self.ranges
            .iter()
            .min_by_key(|r| (r.distance(t), r.symbol))
            .map(|r| r.symbol)
            .expect("ETR is never empty")
    }
}

/// User-facing channel parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelParams {
    pub variant: Variant,
    pub ts: Cycle,
    pub rt: Cycle,
    /// Receiver nop-loop iterations. Defaults to 100 for DI and `si_lines`
    /// for SI.
    pub receiver_iterations: Option<u64>,
    /// Receiver start offset inside each slot.
    pub receiver_delay: Option<Cycle>,
    /// DI sender loop duration beside the receiver. Defaults to the solo
    /// time of an xchg-loop of [`DI_SENDER_XCHG_ITERATIONS`] iterations.
    pub sender_cycles: Option<Cycle>,
    pub si_lines: u32,
    pub frequency_hz: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            variant: Variant::Di,
            ts: 4_000,
            rt: 50_000,
            receiver_iterations: None,
            receiver_delay: None,
            sender_cycles: None,
            si_lines: 60,
            frequency_hz: DEFAULT_FREQUENCY_HZ,
        }
    }
}

impl ChannelParams {
    pub fn di(ts: Cycle, receiver_iterations: u64) -> Self {
        Self { ts, receiver_iterations: Some(receiver_iterations), ..Self::default() }
    }

    pub fn si(ts: Cycle, si_lines: u32) -> Self {
        Self { variant: Variant::Si, ts, si_lines, ..Self::default() }
    }
}

/// A fully built channel: loops, receiver probe and (once calibrated) ETRs.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelConfig {
    pub variant: Variant,
    pub ts: Cycle,
    pub rt: Cycle,
    pub receiver_iterations: u64,
    pub receiver_delay: Cycle,
    /// DI sender target duration; 0 for SI.
    pub sender_cycles: Cycle,
    pub si_lines: u32,
    /// Sender loop per symbol.
    pub symbol_loops: Vec<Program>,
    /// Programs the sender runs once after synchronizing.
    pub prologue: Vec<Program>,
    pub receiver: Program,
    pub etr: Option<Etr>,
    /// Longest noise-free span from slot start to the end of both parties'
    /// work, over all symbols.
    pub slot_work: Option<Cycle>,
    pub frequency_hz: f64,
    pub core: CoreConfig,
}

/// Sent and decoded symbols plus the derived figures.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransmissionResult {
    pub sent: Vec<Symbol>,
    pub received: Vec<Symbol>,
    pub times: Vec<Cycle>,
    pub accuracy: f64,
    pub bandwidth: f64,
}

impl ChannelConfig {
    pub fn new(params: &ChannelParams, table: &LatencyTable, core: CoreConfig) -> Result<Self> {
        if params.ts == 0 {
            return Err(invalid("ts must be positive"));
        }
        if params.rt == 0 {
            return Err(invalid("rt must be positive"));
        }
        if !(params.frequency_hz > 0.0 && params.frequency_hz.is_finite()) {
            return Err(invalid("frequency must be positive"));
        }
        core.validate()?;
        let variant = params.variant;
        let receiver_iterations = params.receiver_iterations.unwrap_or(match variant {
            Variant::Di => 100,
            Variant::Si => params.si_lines.max(1) as u64,
        });
        let receiver_delay = params.receiver_delay.unwrap_or(match variant {
            Variant::Di => 50,
            Variant::Si => 0,
        });
        let receiver = build_nop_loop(receiver_iterations)?;
        let quiet = core.clone().with_noise(NoiseModel::default());
        let sender_cycles = match (variant, params.sender_cycles) {
            (Variant::Si, _) => 0,
            (Variant::Di, Some(c)) => c,
            (Variant::Di, None) => {
                let xchg = build_serial_loop(&table.instruction("xchg", None)?, DI_SENDER_XCHG_ITERATIONS, table)?;
                let mut c = Core::new(quiet.clone(), 0);
                c.push(SENDER, Job::run(xchg, 0));
                c.run_to_completion(Cycle::MAX);
                c.records(SENDER)[0].duration()
            }
        };
        let (symbol_loops, prologue) = match variant {
            Variant::Di => {
                let loops = DI_INSTRUCTIONS
                    .iter()
                    .map(|name| {
                        let inst = table.instruction(name, None)?;
                        size_sender(&quiet, &receiver, receiver_delay, sender_cycles, |k| {
                            build_serial_loop(&inst, k, table)
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (loops, Vec::new())
            }
            Variant::Si => {
                if params.si_lines == 0 {
                    return Err(invalid("si_lines must be positive"));
                }
                let hit = build_flush_load_loop(params.si_lines, false, 1, table)?;
                let miss = build_flush_load_loop(params.si_lines, true, 1, table)?;
                let warm = build_touch(LineSet { base: LOAD_REGION, lines: params.si_lines }, table)?;
                (vec![hit, miss], vec![warm])
            }
        };
        Ok(Self {
            variant,
            ts: params.ts,
            rt: params.rt,
            receiver_iterations,
            receiver_delay,
            sender_cycles,
            si_lines: params.si_lines,
            symbol_loops,
            prologue,
            receiver,
            etr: None,
            slot_work: None,
            frequency_hz: params.frequency_hz,
            core,
        })
    }

    pub fn with_ts(mut self, ts: Cycle) -> Self {
        self.ts = ts;
        self
    }

    pub fn with_core(mut self, core: CoreConfig) -> Self {
        self.core = core;
        self
    }

    /// Bits per second: `len × frequency / ts`.
    pub fn bandwidth(&self) -> f64 {
        self.variant.len() as f64 * self.frequency_hz / self.ts as f64
    }

    fn check_symbols(&self, message: &[Symbol]) -> Result<()> {
        match message.iter().find(|&&s| s as usize >= self.variant.alphabet()) {
            Some(s) => Err(invalid(format!("symbol {s} outside the {} alphabet", self.variant.as_str()))),
            None => Ok(()),
        }
    }
}

/// Picks a sender iteration count so the sender, run beside the receiver,
/// ends near `target` and no earlier than 1.2× the receiver's finish.
fn size_sender(
    quiet: &CoreConfig,
    receiver: &Program,
    delay: Cycle,
    target: Cycle,
    build: impl Fn(u64) -> Result<Program>,
) -> Result<Program> {
    let run = |k: u64| -> Result<(Program, Cycle, Cycle)> {
        let p = build(k)?;
        let mut core = Core::new(quiet.clone(), 0);
        core.push(SENDER, Job::run(p.clone(), 0));
        core.push_all(RECEIVER, [Job::WaitUntil(delay), Job::run(receiver.clone(), 0)]);
        core.run_to_completion(Cycle::MAX);
        Ok((p, core.records(SENDER)[0].end, core.records(RECEIVER)[0].end))
    };
    let mut k = receiver.iterations().max(1);
    for _ in 0..40 {
        let (p, s, r) = run(k)?;
        let want = target.max(r + r / 5);
        if s >= want && (s as f64) < want as f64 * 1.1 + 50.0 {
            return Ok(p);
        }
        let next = ((k as f64) * want as f64 / s as f64).ceil() as u64;
        k = if s < want { next.max(k + 1) } else { next.clamp(1, k - 1) };
        if k == 1 && s >= want {
            return Ok(p);
        }
    }
    Ok(run(k)?.0)
}

/// Sender's job list: synchronize, then one wait + loop per slot.
pub fn sender_jobs(cfg: &ChannelConfig, message: &[Symbol], time_start: Cycle) -> Result<Vec<Job>> {
    cfg.check_symbols(message)?;
    let mut jobs: Vec<Job> = cfg.prologue.iter().map(|p| Job::run(p.clone(), PROLOGUE_TAG)).collect();
    jobs.push(Job::WaitUntil(time_start));
    for (i, &m) in message.iter().enumerate() {
        jobs.push(Job::WaitUntil(time_start + i as Cycle * cfg.ts));
        jobs.push(Job::run(cfg.symbol_loops[m as usize].clone(), i as u64));
    }
    Ok(jobs)
}

/// Receiver's job list: one wait + timed nop-loop per slot.
pub fn receiver_jobs(cfg: &ChannelConfig, n: usize, time_start: Cycle) -> Vec<Job> {
    let mut jobs = vec![Job::WaitUntil(time_start)];
    for i in 0..n {
        jobs.push(Job::WaitUntil(time_start + i as Cycle * cfg.ts + cfg.receiver_delay));
        jobs.push(Job::run(cfg.receiver.clone(), i as u64));
    }
    jobs
}

/// Raw outcome of one co-scheduled run.
#[derive(Clone, Debug)]
pub struct SlotRun {
    pub time_start: Cycle,
    pub sender: Vec<JobRecord>,
    pub receiver: Vec<JobRecord>,
}

impl SlotRun {
    pub fn receiver_times(&self) -> Vec<Cycle> {
        self.receiver.iter().map(JobRecord::duration).collect()
    }

    /// Per slot, the span from its nominal start until both parties are
    /// done with it.
    pub fn slot_spans(&self, ts: Cycle) -> Vec<Cycle> {
        self.sender
            .iter()
            .zip(&self.receiver)
            .map(|(s, r)| s.end.max(r.end) - (self.time_start + s.tag * ts))
            .collect()
    }
}

/// Runs sender and receiver side by side on one core for `message`.
pub fn run_slots(cfg: &ChannelConfig, message: &[Symbol], seed: u64) -> Result<SlotRun> {
    let mut core = Core::new(cfg.core.clone(), seed);
    let time_start = compute_time_start(core.cycle(), cfg.rt)?;
    core.push_all(SENDER, sender_jobs(cfg, message, time_start)?);
    core.push_all(RECEIVER, receiver_jobs(cfg, message.len(), time_start));
    core.run_to_completion(Cycle::MAX);
    let mut sender = core.take_records(SENDER);
    sender.retain(|r| r.tag != PROLOGUE_TAG);
    Ok(SlotRun { time_start, sender, receiver: core.take_records(RECEIVER) })
}

/// Receiver side of a transmission: decode each slot's time.
pub fn receiver_decode(cfg: &ChannelConfig, times: &[Cycle]) -> Result<Vec<Symbol>> {
    let etr = cfg.etr.as_ref().ok_or_else(|| invalid("channel is not calibrated"))?;
    Ok(times.iter().map(|&t| etr.decode(t)).collect())
}

/// Measures `reps` slots per symbol and derives the ETRs.
pub fn calibrate_etr(cfg: &ChannelConfig, reps: usize, seed: u64) -> Result<Etr> {
    if reps < 100 {
        return Err(invalid(format!("calibration needs at least 100 repetitions, got {reps}")));
    }
    let k = cfg.variant.alphabet();
    let message: Vec<Symbol> = (0..reps * k).map(|i| (i % k) as Symbol).collect();
    let run = run_slots(cfg, &message, rng::derive(seed, 0xca1))?;
    let mut samples = vec![Vec::with_capacity(reps); k];
    for (m, t) in message.iter().zip(run.receiver_times()) {
        samples[*m as usize].push(t);
    }
    Etr::from_samples(&samples, ETR_TRIM)
}

/// Noise-free slot work: the longest span any symbol needs.
pub fn measure_slot_work(cfg: &ChannelConfig) -> Result<Cycle> {
    let quiet = cfg.clone().with_core(cfg.core.clone().with_noise(NoiseModel::default()));
    let k = cfg.variant.alphabet() as Symbol;
    let message: Vec<Symbol> = (0..k).chain(0..k).collect();
    let wide = quiet.clone().with_ts(cfg.ts.max(100_000));
    let run = run_slots(&wide, &message, 0)?;
    Ok(run.slot_spans(wide.ts).into_iter().max().unwrap_or(0))
}

/// Calibrated copy of `cfg`.
pub fn calibrate(cfg: &ChannelConfig, reps: usize, seed: u64) -> Result<ChannelConfig> {
    let mut out = cfg.clone();
    out.etr = Some(calibrate_etr(cfg, reps, seed)?);
    out.slot_work = Some(measure_slot_work(cfg)?);
    Ok(out)
}

/// Transmits `message` and scores the decoded symbols.
pub fn evaluate_channel(cfg: &ChannelConfig, message: &[Symbol], seed: u64) -> Result<TransmissionResult> {
    if cfg.etr.is_none() {
        return Err(invalid("channel is not calibrated"));
    }
    let run = run_slots(cfg, message, seed)?;
    let times = run.receiver_times();
    let received = receiver_decode(cfg, &times)?;
    let correct = message.iter().zip(&received).filter(|(a, b)| a == b).count();
    let accuracy = if message.is_empty() { 1.0 } else { correct as f64 / message.len() as f64 };
    Ok(TransmissionResult {
        sent: message.to_vec(),
        received,
        times,
        accuracy,
        bandwidth: cfg.bandwidth(),
    })
}

/// Uniformly random symbols for `variant`.
pub fn random_message(variant: Variant, n: usize, seed: u64) -> Vec<Symbol> {
    use rand::Rng;
    let mut r = rng::stream(seed, 0x5e_4d);
    (0..n).map(|_| r.gen_range(0..variant.alphabet()) as Symbol).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn di(ts: Cycle) -> ChannelConfig {
        ChannelConfig::new(&ChannelParams::di(ts, 100), &LatencyTable::default(), CoreConfig::default())
            .unwrap()
    }

    #[test]
    fn time_start_examples() {
        assert_eq!(compute_time_start(39_243_466, 50_000).unwrap(), 39_300_000);
        assert_eq!(compute_time_start(0, 50_000).unwrap(), 100_000);
        assert_eq!(compute_time_start(99_999, 100).unwrap(), 100_100);
        assert!(compute_time_start(5, 0).is_err());
    }

    proptest! {
        #[test]
        fn time_start_properties(tsc in 0u64..1 << 48, rt in 1u64..1 << 20) {
            let t = compute_time_start(tsc, rt).unwrap();
            prop_assert!(t > tsc);
            prop_assert_eq!(t % rt, 0);
            prop_assert!(t - tsc > rt && t - tsc <= 2 * rt);
        }

        #[test]
        fn decode_is_total_and_respects_ranges(t in 0u64..3000) {
            let etr = Etr::from_ranges(vec![
                EtrRange { symbol: 2, lo: 100, hi: 200 },
                EtrRange { symbol: 0, lo: 500, hi: 600 },
                EtrRange { symbol: 1, lo: 300, hi: 400 },
            ]).unwrap();
            let s = etr.decode(t);
            if let Some(r) = etr.ranges().iter().find(|r| r.lo <= t && t <= r.hi) {
                prop_assert_eq!(s, r.symbol);
            }
        }
    }

    #[test]
    fn etr_rules() {
        let etr = Etr::from_ranges(vec![
            EtrRange { symbol: 1, lo: 10, hi: 20 },
            EtrRange { symbol: 0, lo: 30, hi: 40 },
        ])
        .unwrap();
        assert_eq!(etr.decode(0), 1);
        assert_eq!(etr.decode(25), 0);
        assert_eq!(etr.decode(24), 1);
        assert_eq!(etr.decode(1000), 0);
        assert!(Etr::from_ranges(vec![
            EtrRange { symbol: 1, lo: 10, hi: 30 },
            EtrRange { symbol: 0, lo: 30, hi: 40 },
        ])
        .is_err());
    }

    #[test]
    fn etr_from_samples_splits_small_overlaps() {
        let a: Vec<Cycle> = (100..=200).collect();
        let b: Vec<Cycle> = (190..=300).collect();
        let etr = Etr::from_samples(&[a, b], 0.0).unwrap();
        let (x, y) = (etr.range(0).unwrap(), etr.range(1).unwrap());
        assert!(x.hi < y.lo && x.hi >= 190 && y.lo <= 201);
        let c: Vec<Cycle> = (120..=280).collect();
        assert!(matches!(
            Etr::from_samples(&[(100..=200).collect(), c], 0.0),
            Err(Error::CalibrationFailure(_))
        ));
    }

    #[test]
    fn di_loops_and_bandwidth() {
        let cfg = di(4_000);
        assert_eq!(cfg.symbol_loops.len(), 4);
        assert_eq!(cfg.symbol_loops[2].label(), "adc-loop");
        assert_eq!(cfg.bandwidth(), 1.45e6);
        let si = ChannelConfig::new(&ChannelParams::si(12_000, 60), &LatencyTable::default(), CoreConfig::default())
            .unwrap();
        assert!((si.bandwidth() - 241_666.666).abs() < 1.0);
        assert!(sender_jobs(&cfg, &[4], 0).is_err());
        assert_eq!(sender_jobs(&cfg, &[], 100).unwrap(), vec![Job::WaitUntil(100)]);
        assert!(ChannelConfig::new(&ChannelParams { rt: 0, ..ChannelParams::default() }, &LatencyTable::default(), CoreConfig::default()).is_err());
    }

    #[test]
    fn di_senders_run_for_the_target() {
        let cfg = di(4_000);
        // 350 × 9 cycles of xchg chain plus pipeline fill
        assert!((3_150..3_200).contains(&cfg.sender_cycles), "{}", cfg.sender_cycles);
        let quiet = cfg.core.clone();
        for p in &cfg.symbol_loops {
            let mut c = Core::new(quiet.clone(), 0);
            c.push(SENDER, Job::run(p.clone(), 0));
            c.push_all(RECEIVER, [Job::WaitUntil(cfg.receiver_delay), Job::run(cfg.receiver.clone(), 0)]);
            c.run_to_completion(Cycle::MAX);
            let end = c.records(SENDER)[0].end;
            assert!(end >= cfg.sender_cycles && (end as f64) < cfg.sender_cycles as f64 * 1.1 + 50.0, "{} ends at {end}", p.label());
        }
    }

    #[test]
    fn calibration_needs_reps() {
        assert!(calibrate_etr(&di(4_000), 99, 0).is_err());
    }

    #[test]
    fn noise_free_di_round_trip() {
        let cfg = calibrate(&di(4_000), 100, 1).unwrap();
        let work = cfg.slot_work.unwrap();
        assert!(work > 3_000 && work < 4_000, "slot work {work}");
        let msg = random_message(Variant::Di, 400, 9);
        let r = evaluate_channel(&cfg, &msg, 2).unwrap();
        assert_eq!(r.accuracy, 1.0);
        // An absent sender reads as the fastest symbol.
        let solo = cfg.etr.as_ref().unwrap().ranges()[0].symbol;
        assert_eq!(solo, 3);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let core = CoreConfig::default().with_noise(NoiseModel::standard());
        let cfg = calibrate(&di(4_000).with_core(core), 100, 1).unwrap();
        let msg = random_message(Variant::Di, 300, 4);
        assert_eq!(evaluate_channel(&cfg, &msg, 5).unwrap(), evaluate_channel(&cfg, &msg, 5).unwrap());
    }
}
