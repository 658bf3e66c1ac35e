//! Spectre v1 variant read out through retirement contention.
//!
//! Each attack period the victim trains its bounds check, flushes
//! `array_size` and calls the gadget with an out-of-bounds index. The
//! secret-dependent loop runs transiently; after the squash the victim sits
//! in recovery for a penalty that depends on which loop ran, then executes
//! a marker nop-loop. The attacker on the sibling thread times back-to-back
//! nop-loop probes. While the victim retires, each probe takes about twice
//! its solo time; the uncontended gap between training and marker is the
//! branch resolution plus the recovery penalty, so its length carries the
//! bit.

use serde::{Deserialize, Serialize};

use crate::channel::compute_time_start;
use crate::counters::CounterSet;
use crate::error::{invalid, Error, Result};
use crate::isa::{build_nop_loop, Addr, LatencyTable, Program};
use crate::pipeline::{Core, CoreConfig, Job, NoiseModel, ThreadId};
use crate::rng;
use crate::{Cycle, DEFAULT_FREQUENCY_HZ};

pub const VICTIM: ThreadId = ThreadId::T0;
pub const ATTACKER: ThreadId = ThreadId::T1;

const SIZE_ADDR: Addr = 0x30_0000;
const ARRAY1_ADDR: Addr = 0x30_1000;
const ARRAY2_ADDR: Addr = 0x30_2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectreConfig {
    pub attack_period: Cycle,
    /// Probes per attack.
    pub num: usize,
    pub probe_iterations: u64,
    /// Recovery stall when the secret bit is 0.
    pub penalty_loop1: Cycle,
    /// Recovery stall when the secret bit is 1.
    pub penalty_loop2: Cycle,
    pub votes: usize,
    /// In-bounds calls before the malicious one.
    pub train_len: u64,
    /// Victim start offset inside the period.
    pub victim_offset: Cycle,
    pub marker_iterations: u64,
    /// A probe is elevated when slower than this multiple of the solo time.
    pub marker_factor: f64,
    /// Consecutive elevated probes that make a marker.
    pub marker_run: usize,
    /// Labeled attacks used to fit the decision threshold.
    pub warmup_attacks: usize,
    pub frequency_hz: f64,
}

impl Default for SpectreConfig {
    fn default() -> Self {
        Self {
            attack_period: 20_000,
            num: 20,
            probe_iterations: 100,
            penalty_loop1: 68,
            penalty_loop2: 57,
            votes: 5,
            train_len: 1_000,
            victim_offset: 1_000,
            marker_iterations: 400,
            marker_factor: 1.5,
            marker_run: 3,
            warmup_attacks: 40,
            frequency_hz: DEFAULT_FREQUENCY_HZ,
        }
    }
}

impl SpectreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num == 0 {
            return Err(invalid("num must be at least 1"));
        }
        if !(self.penalty_loop1 > self.penalty_loop2 && self.penalty_loop2 > 0) {
            return Err(invalid("penalties must satisfy loop1 > loop2 > 0"));
        }
        if self.votes % 2 == 0 {
            return Err(invalid("votes must be odd"));
        }
        if self.attack_period == 0 || self.probe_iterations == 0 || self.marker_iterations == 0 {
            return Err(invalid("period and loop sizes must be positive"));
        }
        if self.marker_run == 0 || !(self.marker_factor > 1.0) {
            return Err(invalid("marker detection needs a run ≥ 1 and a factor > 1"));
        }
        if self.warmup_attacks < 2 {
            return Err(invalid("need at least two warm-up attacks"));
        }
        if !(self.frequency_hz > 0.0) {
            return Err(invalid("frequency must be positive"));
        }
        Ok(())
    }

    /// Secret bits per second after voting.
    pub fn bandwidth(&self) -> f64 {
        self.frequency_hz / (self.attack_period as f64 * self.votes as f64)
    }

    fn penalty(&self, bit: u8) -> Cycle {
        if bit == 0 {
            self.penalty_loop1
        } else {
            self.penalty_loop2
        }
    }
}

/// Two-bit saturating counter; predicts taken from state 2 upwards.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BranchPredictor {
    state: u8,
}

impl BranchPredictor {
    pub fn predict(&self) -> bool {
        self.state >= 2
    }

    /// Records an outcome; returns whether it was mispredicted.
    pub fn update(&mut self, taken: bool) -> bool {
        let miss = self.predict() != taken;
        self.state = if taken { (self.state + 1).min(3) } else { self.state.saturating_sub(1) };
        miss
    }
}

/// Victim and attacker programs, built once per campaign.
#[derive(Clone, Debug)]
pub struct Programs {
    training: Program,
    malicious: Program,
    marker: Program,
    probe: Program,
}

impl Programs {
    pub fn new(cfg: &SpectreConfig, table: &LatencyTable) -> Result<Self> {
        cfg.validate()?;
        let load = |a| table.instruction("load", Some(a));
        let dec = table.instruction("dec", None)?;
        let jnz = table.instruction("jnz", None)?;
        let alu = table.instruction("add", None)?.with_serial(false);
        let training = if cfg.train_len == 0 {
            None
        } else {
            Some(Program::looped(
                "victim-train",
                vec![load(SIZE_ADDR)?, load(ARRAY1_ADDR)?, load(ARRAY2_ADDR)?, alu, dec, jnz.clone()],
                cfg.train_len,
            )?)
        };
        let malicious = Program::new(
            "victim-oob",
            vec![table.instruction("flush", Some(SIZE_ADDR))?, load(SIZE_ADDR)?, jnz],
        )?;
        Ok(Self {
            training: training.unwrap_or_else(|| malicious.clone()),
            malicious,
            marker: build_nop_loop(cfg.marker_iterations)?,
            probe: build_nop_loop(cfg.probe_iterations)?,
        })
    }
}

/// Victim jobs for one attack. The predictor sees `train_len` in-bounds
/// (taken) calls, then the out-of-bounds one; only a misprediction of the
/// latter triggers a recovery stall.
pub fn victim_attack_iteration(
    secret_bit: u8,
    cfg: &SpectreConfig,
    programs: &Programs,
    predictor: &mut BranchPredictor,
    period_start: Cycle,
) -> Vec<Job> {
    let mut jobs = vec![Job::WaitUntil(period_start + cfg.victim_offset)];
    if cfg.train_len > 0 {
        for _ in 0..cfg.train_len {
            predictor.update(true);
        }
        jobs.push(Job::run(programs.training.clone(), 0));
    }
    jobs.push(Job::run(programs.malicious.clone(), 0));
    if predictor.update(false) {
        jobs.push(Job::Stall(cfg.penalty(secret_bit)));
    }
    jobs.push(Job::run(programs.marker.clone(), 0));
    jobs
}

/// Attacker jobs for one attack: `num` back-to-back timed probes.
pub fn attacker_probe(cfg: &SpectreConfig, programs: &Programs, attack: u64, period_start: Cycle) -> Result<Vec<Job>> {
    if cfg.num == 0 {
        return Err(invalid("num must be at least 1"));
    }
    let mut jobs = vec![Job::WaitUntil(period_start)];
    for k in 0..cfg.num as u64 {
        jobs.push(Job::run(programs.probe.clone(), attack * cfg.num as u64 + k));
    }
    Ok(jobs)
}

/// Locates the contended region around the recovery window: the last run
/// of `marker_run` elevated probes, extended backwards over at most one
/// fast probe into the training region. Returns its first and last index.
pub fn locate_marker(times: &[Cycle], baseline: f64, cfg: &SpectreConfig) -> Option<(usize, usize)> {
    let elevated: Vec<bool> = times.iter().map(|&t| t as f64 > cfg.marker_factor * baseline).collect();
    let mut end = None;
    let mut i = elevated.len();
    while i > 0 {
        i -= 1;
        if !elevated[i] {
            continue;
        }
        let mut s = i;
        while s > 0 && elevated[s - 1] {
            s -= 1;
        }
        if i - s + 1 >= cfg.marker_run {
            end = Some((s, i));
            break;
        }
        i = s;
    }
    let (mut first, last) = end?;
    if first >= 2 && !elevated[first - 1] && elevated[first - 2] {
        first -= 2;
        while first > 0 && elevated[first - 1] {
            first -= 1;
        }
    }
    Some((first, last))
}

/// Excess over full contention across the probes strictly inside the
/// located region: minus the length of the uncontended gap, up to a
/// constant.
pub fn attack_statistic(times: &[Cycle], baseline: f64, cfg: &SpectreConfig) -> Option<f64> {
    let (first, last) = locate_marker(times, baseline, cfg)?;
    if last < first + 2 {
        return None;
    }
    let inner = &times[first + 1..last];
    Some(inner.iter().map(|&t| t as f64 - 2.0 * baseline).sum())
}

/// Attacker-side decision rule, fitted on labeled warm-up attacks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    /// Solo probe time.
    pub baseline: f64,
    pub threshold: f64,
    /// Bit reported when the statistic is strictly below the threshold.
    pub fast_bit: u8,
}

/// Decodes one attack's probe times; `None` is an erasure.
pub fn locate_and_decode(times: &[Cycle], decoder: &Decoder, cfg: &SpectreConfig) -> Option<u8> {
    let s = attack_statistic(times, decoder.baseline, cfg)?;
    Some(if s < decoder.threshold { decoder.fast_bit } else { 1 - decoder.fast_bit })
}

/// Raw timings of a sequence of attacks.
#[derive(Clone, Debug)]
pub struct AttackRun {
    pub probe_times: Vec<Vec<Cycle>>,
    pub victim: CounterSet,
    pub attacker: CounterSet,
}

/// Runs one attack per entry of `bits` on a fresh core.
pub fn run_attacks(
    cfg: &SpectreConfig,
    programs: &Programs,
    core_cfg: &CoreConfig,
    bits: &[u8],
    seed: u64,
) -> Result<AttackRun> {
    if let Some(b) = bits.iter().find(|&&b| b > 1) {
        return Err(invalid(format!("secret bits must be 0 or 1, got {b}")));
    }
    let mut core = Core::new(core_cfg.clone(), seed);
    let t0 = compute_time_start(core.cycle(), cfg.attack_period)?;
    let mut predictor = BranchPredictor::default();
    for (i, &bit) in bits.iter().enumerate() {
        let start = t0 + i as Cycle * cfg.attack_period;
        core.push_all(VICTIM, victim_attack_iteration(bit, cfg, programs, &mut predictor, start));
        core.push_all(ATTACKER, attacker_probe(cfg, programs, i as u64, start)?);
    }
    core.run_to_completion(Cycle::MAX);
    let mut probe_times = vec![Vec::with_capacity(cfg.num); bits.len()];
    for r in core.records(ATTACKER) {
        probe_times[r.tag as usize / cfg.num].push(r.duration());
    }
    Ok(AttackRun {
        probe_times,
        victim: *core.counters(VICTIM),
        attacker: *core.counters(ATTACKER),
    })
}

/// Median solo probe time.
pub fn solo_baseline(cfg: &SpectreConfig, programs: &Programs, core_cfg: &CoreConfig) -> Result<f64> {
    let mut core = Core::new(core_cfg.clone().with_noise(NoiseModel::default()), 0);
    core.push_all(ATTACKER, attacker_probe(cfg, programs, 0, 0)?);
    core.run_to_completion(Cycle::MAX);
    let mut t: Vec<Cycle> = core.records(ATTACKER).iter().map(|r| r.duration()).collect();
    t.sort_unstable();
    Ok(t[t.len() / 2] as f64)
}

/// Fits the threshold as the midpoint of the two class medians of the
/// warm-up statistic.
pub fn calibrate_decoder(
    cfg: &SpectreConfig,
    programs: &Programs,
    core_cfg: &CoreConfig,
    seed: u64,
) -> Result<Decoder> {
    let baseline = solo_baseline(cfg, programs, core_cfg)?;
    let bits: Vec<u8> = (0..cfg.warmup_attacks).map(|i| (i % 2) as u8).collect();
    let run = run_attacks(cfg, programs, core_cfg, &bits, rng::derive(seed, 0x3a7))?;
    let mut stats = [Vec::new(), Vec::new()];
    for (b, times) in bits.iter().zip(&run.probe_times) {
        if let Some(s) = attack_statistic(times, baseline, cfg) {
            stats[*b as usize].push(s);
        }
    }
    if stats.iter().any(Vec::is_empty) {
        return Err(Error::CalibrationFailure("no marker found in warm-up attacks".into()));
    }
    let mid = stats.map(|mut v| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 }
    });
    if mid[0] == mid[1] {
        return Err(Error::CalibrationFailure("warm-up classes are indistinguishable".into()));
    }
    Ok(Decoder {
        baseline,
        threshold: (mid[0] + mid[1]) / 2.0,
        fast_bit: if mid[0] < mid[1] { 0 } else { 1 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CampaignResult {
    pub secret: Vec<u8>,
    /// Voted bit per secret bit; `None` when the vote is tied or empty.
    pub decoded: Vec<Option<u8>>,
    pub accuracy: f64,
    /// Accuracy of individual attacks before voting.
    pub single_attack_accuracy: f64,
    pub erasures: usize,
    pub bandwidth: f64,
    pub decoder: Decoder,
    pub victim: CounterSet,
    pub attacker: CounterSet,
}

/// Leaks `secret`, one bit per `votes` attacks.
pub fn run_campaign(
    secret: &[u8],
    cfg: &SpectreConfig,
    table: &LatencyTable,
    core_cfg: &CoreConfig,
    seed: u64,
) -> Result<CampaignResult> {
    core_cfg.validate()?;
    let programs = Programs::new(cfg, table)?;
    let decoder = calibrate_decoder(cfg, &programs, core_cfg, seed)?;
    let bits: Vec<u8> = secret.iter().flat_map(|&b| std::iter::repeat(b).take(cfg.votes)).collect();
    let run = run_attacks(cfg, &programs, core_cfg, &bits, seed)?;
    let guesses: Vec<Option<u8>> =
        run.probe_times.iter().map(|t| locate_and_decode(t, &decoder, cfg)).collect();
    let erasures = guesses.iter().filter(|g| g.is_none()).count();
    let single = guesses.iter().zip(&bits).filter(|(g, b)| **g == Some(**b)).count();
    let decoded: Vec<Option<u8>> = guesses.chunks(cfg.votes).map(majority).collect();
    let correct = decoded.iter().zip(secret).filter(|(d, s)| **d == Some(**s)).count();
    let frac = |n: usize, d: usize| if d == 0 { 1.0 } else { n as f64 / d as f64 };
    Ok(CampaignResult {
        secret: secret.to_vec(),
        accuracy: frac(correct, secret.len()),
        single_attack_accuracy: frac(single, bits.len()),
        decoded,
        erasures,
        bandwidth: cfg.bandwidth(),
        decoder,
        victim: run.victim,
        attacker: run.attacker,
    })
}

/// Majority over non-erased guesses.
fn majority(guesses: &[Option<u8>]) -> Option<u8> {
    let ones = guesses.iter().filter(|g| **g == Some(1)).count();
    let zeros = guesses.iter().filter(|g| **g == Some(0)).count();
    match ones.cmp(&zeros) {
        std::cmp::Ordering::Greater => Some(1),
        std::cmp::Ordering::Less => Some(0),
        std::cmp::Ordering::Equal => None,
    }
}

pub fn random_secret(n: usize, seed: u64) -> Vec<u8> {
    use rand::Rng;
    let mut r = rng::stream(seed, 0x5ec7);
    (0..n).map(|_| r.gen_range(0..2u8)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn programs(cfg: &SpectreConfig) -> Programs {
        Programs::new(cfg, &LatencyTable::default()).unwrap()
    }

    #[test]
    fn predictor_trains() {
        let mut p = BranchPredictor::default();
        assert!(!p.predict());
        p.update(true);
        p.update(true);
        assert!(p.predict());
        assert!(!p.update(true));
        assert!(p.update(false));
        assert!(p.predict());
    }

    #[test]
    fn config_validation() {
        let d = SpectreConfig::default();
        assert!(d.validate().is_ok());
        assert_eq!(d.bandwidth(), 29_000.0);
        assert!(SpectreConfig { num: 0, ..d.clone() }.validate().is_err());
        assert!(SpectreConfig { votes: 4, ..d.clone() }.validate().is_err());
        assert!(SpectreConfig { penalty_loop2: 70, ..d }.validate().is_err());
    }

    #[test]
    fn victim_stalls_only_on_misprediction() {
        let cfg = SpectreConfig::default();
        let p = programs(&cfg);
        let mut pred = BranchPredictor::default();
        let jobs = victim_attack_iteration(0, &cfg, &p, &mut pred, 0);
        assert!(jobs.contains(&Job::Stall(68)));
        let jobs = victim_attack_iteration(1, &cfg, &p, &mut pred, 0);
        assert!(jobs.contains(&Job::Stall(57)));
        let untrained = SpectreConfig { train_len: 0, ..cfg };
        let jobs = victim_attack_iteration(0, &untrained, &p, &mut BranchPredictor::default(), 0);
        assert!(!jobs.iter().any(|j| matches!(j, Job::Stall(_))));
    }

    #[test]
    fn marker_location_rules() {
        let cfg = SpectreConfig::default();
        let t = [450, 450, 900, 900, 900, 620, 900, 900, 900, 900, 450, 450];
        assert_eq!(locate_marker(&t, 450.0, &cfg), Some((2, 9)));
        let merged = [450, 900, 900, 780, 800, 900, 900, 450];
        assert_eq!(locate_marker(&merged, 450.0, &cfg), Some((1, 6)));
        assert_eq!(locate_marker(&[450; 20], 450.0, &cfg), None);
        assert_eq!(locate_marker(&[450, 900, 900, 450], 450.0, &cfg), None);
        let d = Decoder { baseline: 450.0, threshold: -262.0, fast_bit: 0 };
        assert_eq!(locate_and_decode(&[450; 20], &d, &cfg), None);
        // Statistic exactly on the threshold is not "fast".
        let on = [450, 900, 900, 900 - 262, 900, 900, 900, 450];
        assert_eq!(locate_and_decode(&on, &d, &cfg), Some(1));
        let fast = [450, 900, 900, 900 - 263, 900, 900, 900, 450];
        assert_eq!(locate_and_decode(&fast, &d, &cfg), Some(0));
    }

    #[test]
    fn idle_victim_leaves_probes_at_baseline() {
        let cfg = SpectreConfig::default();
        let p = programs(&cfg);
        let base = solo_baseline(&cfg, &p, &CoreConfig::default()).unwrap();
        let mut core = Core::new(CoreConfig::default(), 0);
        core.push_all(ATTACKER, attacker_probe(&cfg, &p, 0, 0).unwrap());
        core.run_to_completion(Cycle::MAX);
        assert!(core.records(ATTACKER).iter().all(|r| r.duration() as f64 == base));
    }

    #[test]
    fn longer_penalty_is_faster_at_every_offset() {
        let core = CoreConfig::default();
        for offset in (600..1400).step_by(37) {
            let cfg = SpectreConfig { victim_offset: offset, ..SpectreConfig::default() };
            let p = programs(&cfg);
            let base = solo_baseline(&cfg, &p, &core).unwrap();
            let run = run_attacks(&cfg, &p, &core, &[0, 1, 0, 1], 0).unwrap();
            let s: Vec<f64> =
                run.probe_times.iter().map(|t| attack_statistic(t, base, &cfg).unwrap()).collect();
            assert!(s[0] < s[1] && s[2] < s[3], "offset {offset}: {s:?}");
        }
    }

    #[test]
    fn noise_free_campaign_is_exact() {
        let cfg = SpectreConfig::default();
        let secret = random_secret(40, 1);
        let r = run_campaign(&secret, &cfg, &LatencyTable::default(), &CoreConfig::default(), 2).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.erasures, 0);
        assert_eq!(r.decoder.fast_bit, 0);
        assert!(r.victim.miss_rate() < 0.01);
        assert_eq!(r.attacker.cache_misses, 0);
    }
}
