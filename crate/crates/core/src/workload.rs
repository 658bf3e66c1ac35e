//! Synthetic victim workloads and attacker-side timing traces for program
//! inference.
//!
//! A workload is a sequence of phases, each an instruction mix. It runs as
//! an endless stream on thread 0 while thread 1 times back-to-back short
//! nop-loops; consecutive probe times are cut into fixed-length samples.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::isa::{build_nop_loop, Addr, InstKind, InstructionSpec, LatencyTable, Program, LINE_SIZE};
use crate::pipeline::{Core, CoreConfig, Job, JobSource, ThreadId};
use crate::rng::{self, SimRng};
use crate::Cycle;

/// Probe times per sample.
pub const TRACE_LEN: usize = 2_000;
/// Nop-loop iterations per trace probe.
pub const TRACE_PROBE_ITERATIONS: u64 = 10;
/// Instructions per generated chunk.
const CHUNK: usize = 200;
const HIT_REGION: Addr = 0x40_0000;
const HIT_LINES: u64 = 64;
const MISS_REGION: Addr = 0x50_0000;
const MISS_LINES: u64 = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub duration: Cycle,
    /// Probability per instruction name.
    pub mix: BTreeMap<String, f64>,
    /// Fraction of loads that miss.
    pub miss_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub label: String,
    pub phases: Vec<Phase>,
}

impl WorkloadSpec {
    pub fn single(label: &str, mix: &[(&str, f64)], miss_rate: f64) -> Self {
        Self {
            label: label.to_string(),
            phases: vec![Phase {
                duration: 1_000_000,
                mix: mix.iter().map(|&(n, p)| (n.to_string(), p)).collect(),
                miss_rate,
            }],
        }
    }

    pub fn validate(&self, table: &LatencyTable) -> Result<()> {
        if self.phases.is_empty() {
            return Err(invalid(format!("{}: workload needs at least one phase", self.label)));
        }
        for p in &self.phases {
            if p.duration == 0 {
                return Err(invalid(format!("{}: phase duration must be positive", self.label)));
            }
            if !(0.0..=1.0).contains(&p.miss_rate) {
                return Err(invalid(format!("{}: miss_rate must lie in [0, 1]", self.label)));
            }
            let total: f64 = p.mix.values().sum();
            if (total - 1.0).abs() > 1e-9 || p.mix.values().any(|&v| !(v >= 0.0)) {
                return Err(invalid(format!(
                    "{}: mix probabilities must be non-negative and sum to 1 (got {total})",
                    self.label
                )));
            }
            for name in p.mix.keys() {
                let e = table
                    .lookup(name)
                    .ok_or_else(|| invalid(format!("{}: unknown instruction {name}", self.label)))?;
                if e.kind == InstKind::Flush {
                    return Err(invalid(format!("{}: flushes come from miss_rate", self.label)));
                }
            }
        }
        Ok(())
    }
}

struct PhaseSampler {
    duration: Cycle,
    cumulative: Vec<(f64, InstructionSpec)>,
    miss_rate: f64,
}

/// Endless, deterministic instruction stream realizing a workload.
pub struct WorkloadStream {
    phases: Vec<PhaseSampler>,
    period: Cycle,
    flush: InstructionSpec,
    load: InstructionSpec,
    rng: SimRng,
    next_miss: u64,
    chunks: u64,
}

impl WorkloadStream {
    pub fn new(spec: &WorkloadSpec, table: &LatencyTable, seed: u64) -> Result<Self> {
        spec.validate(table)?;
        let phases = spec
            .phases
            .iter()
            .map(|p| {
                let mut acc = 0.0;
                let cumulative = p
                    .mix
                    .iter()
                    .filter(|(_, &v)| v > 0.0)
                    .map(|(name, &v)| {
                        acc += v;
                        let addr = table.lookup(name).expect("validated").kind.is_memory().then_some(HIT_REGION);
                        Ok((acc, table.instruction(name, addr)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PhaseSampler { duration: p.duration, cumulative, miss_rate: p.miss_rate })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            period: phases.iter().map(|p| p.duration).sum(),
            phases,
            flush: table.instruction("flush", Some(MISS_REGION))?,
            load: table.instruction("load", Some(MISS_REGION))?,
            rng: rng::stream(seed, 0x3011),
            next_miss: 0,
            chunks: 0,
        })
    }

    fn phase_at(&self, now: Cycle) -> &PhaseSampler {
        let mut t = now % self.period;
        for p in &self.phases {
            if t < p.duration {
                return p;
            }
            t -= p.duration;
        }
        self.phases.last().expect("non-empty")
    }

    /// Next chunk of the stream, drawn from the phase active at `now`.
    pub fn next_program(&mut self, now: Cycle) -> Program {
        let phase = self.phase_at(now);
        let (cumulative, miss_rate) = (phase.cumulative.clone(), phase.miss_rate);
        let mut insts = Vec::with_capacity(CHUNK + 8);
        while insts.len() < CHUNK {
            let u: f64 = self.rng.gen();
            let inst = &cumulative
                .iter()
                .find(|(c, _)| u < *c)
                .unwrap_or_else(|| cumulative.last().expect("non-empty mix"))
                .1;
            if inst.kind() == InstKind::Load {
                if self.rng.gen_bool(miss_rate) {
                    let a = MISS_REGION + (self.next_miss % MISS_LINES) * LINE_SIZE;
                    self.next_miss += 1;
                    insts.push(self.flush.clone().at(a));
                    insts.push(self.load.clone().at(a));
                } else {
                    let a = HIT_REGION + self.rng.gen_range(0..HIT_LINES) * LINE_SIZE;
                    insts.push(inst.clone().at(a));
                }
            } else {
                insts.push(inst.clone());
            }
        }
        self.chunks += 1;
        Program::new("workload", insts).expect("chunk is non-empty")
    }
}

impl JobSource for WorkloadStream {
    fn next_job(&mut self, now: Cycle) -> Option<Job> {
        let p = self.next_program(now);
        Some(Job::run(p, self.chunks))
    }
}

/// Validates `spec` and returns its stream.
pub fn synth_workload(spec: &WorkloadSpec, table: &LatencyTable, seed: u64) -> Result<WorkloadStream> {
    WorkloadStream::new(spec, table, seed)
}

/// Endless back-to-back probes.
struct ProbeSource {
    probe: Program,
    next: u64,
}

impl JobSource for ProbeSource {
    fn next_job(&mut self, _now: Cycle) -> Option<Job> {
        self.next += 1;
        Some(Job::run(self.probe.clone(), self.next - 1))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSample {
    pub label: String,
    pub times: Vec<Cycle>,
}

impl TraceSample {
    pub fn mean(&self) -> f64 {
        self.times.iter().sum::<Cycle>() as f64 / self.times.len() as f64
    }
}

/// Runs `spec` beside a probing thread and cuts `count` non-overlapping
/// samples of [`TRACE_LEN`] probe times. Also returns the cycles simulated.
pub fn sample_traces(
    spec: &WorkloadSpec,
    table: &LatencyTable,
    core_cfg: &CoreConfig,
    probe_iterations: u64,
    count: usize,
    seed: u64,
) -> Result<(Vec<TraceSample>, Cycle)> {
    if count == 0 {
        return Err(invalid("sample count must be at least 1"));
    }
    let stream = synth_workload(spec, table, seed)?;
    let mut core = Core::new(core_cfg.clone(), rng::derive(seed, 0x7ace));
    core.set_source(ThreadId::T0, Box::new(stream));
    core.set_source(ThreadId::T1, Box::new(ProbeSource { probe: build_nop_loop(probe_iterations)?, next: 0 }));
    let need = count * TRACE_LEN;
    let mut times = Vec::with_capacity(need);
    while times.len() < need {
        core.run_until_records(ThreadId::T1, TRACE_LEN, Cycle::MAX);
        let recs = core.take_records(ThreadId::T1);
        times.extend(recs.iter().take(need - times.len()).map(|r| r.duration()));
    }
    let samples = times
        .chunks(TRACE_LEN)
        .map(|c| TraceSample { label: spec.label.clone(), times: c.to_vec() })
        .collect();
    Ok((samples, core.cycle()))
}

/// Original label → group label.
pub type LabelGrouping = BTreeMap<String, String>;

fn apply<'a>(label: &'a str, grouping: Option<&'a LabelGrouping>) -> Result<&'a str> {
    match grouping {
        None => Ok(label),
        Some(g) => g
            .get(label)
            .map(String::as_str)
            .ok_or_else(|| invalid(format!("grouping has no entry for label {label}"))),
    }
}

/// Writes `label,t0,...,t1999` rows, relabeled through `grouping`.
pub fn export_dataset(samples: &[TraceSample], grouping: Option<&LabelGrouping>, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(samples.len() * TRACE_LEN * 4 + 64);
    out.push_str("label");
    for i in 0..TRACE_LEN {
        out.push_str(&format!(",t{i}"));
    }
    out.push('\n');
    for s in samples {
        if s.times.len() != TRACE_LEN {
            return Err(invalid(format!("sample of {} has {} times", s.label, s.times.len())));
        }
        out.push_str(apply(&s.label, grouping)?);
        for t in &s.times {
            out.push(',');
            out.push_str(&t.to_string());
        }
        out.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Parses a file written by [`export_dataset`].
pub fn read_dataset(path: &Path) -> Result<Vec<TraceSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| invalid("empty dataset"))?;
    if header.split(',').count() != TRACE_LEN + 1 {
        return Err(invalid("dataset header has the wrong width"));
    }
    lines
        .map(|l| {
            let mut f = l.split(',');
            let label = f.next().unwrap_or_default().to_string();
            let times = f
                .map(|v| v.parse().map_err(|_| invalid(format!("bad time {v:?}"))))
                .collect::<Result<Vec<Cycle>>>()?;
            if times.len() != TRACE_LEN {
                return Err(invalid("dataset row has the wrong width"));
            }
            Ok(TraceSample { label, times })
        })
        .collect()
}

/// Everything the downstream classifier needs to know about a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub trace_len: usize,
    pub probe_iterations: u64,
    pub windows: String,
    pub samples_per_label: usize,
    pub labels: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub counts: BTreeMap<String, usize>,
    pub cycles_simulated: BTreeMap<String, Cycle>,
    pub grouping: Option<LabelGrouping>,
    pub workloads: Vec<WorkloadSpec>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// The ten named workloads. perlbench/x264 and xalancbmk/leela/deepsjeng
/// are near-identical on purpose.
pub fn default_suite() -> Vec<WorkloadSpec> {
    let s = WorkloadSpec::single;
    vec![
        s("perlbench", &[("add", 0.3), ("dec", 0.3), ("jnz", 0.2), ("load", 0.2)], 0.01),
        s("gcc", &[("load", 0.35), ("add", 0.2), ("dec", 0.2), ("jnz", 0.2), ("xchg", 0.05)], 0.03),
        s("mcf", &[("load", 0.45), ("add", 0.2), ("dec", 0.15), ("jnz", 0.2)], 0.2),
        s("xz", &[("adc", 0.3), ("add", 0.2), ("load", 0.2), ("dec", 0.15), ("jnz", 0.15)], 0.005),
        s(
            "xalancbmk",
            &[("load", 0.3), ("mfence", 0.02), ("xchg", 0.1), ("add", 0.2), ("dec", 0.18), ("jnz", 0.2)],
            0.05,
        ),
        s("omnetpp", &[("load", 0.4), ("xchg", 0.1), ("add", 0.2), ("dec", 0.1), ("jnz", 0.2)], 0.1),
        s("exchange2", &[("nop", 0.3), ("add", 0.3), ("dec", 0.2), ("jnz", 0.2)], 0.0),
        s("x264", &[("add", 0.3), ("dec", 0.29), ("jnz", 0.2), ("load", 0.21)], 0.01),
        s(
            "leela",
            &[("load", 0.3), ("mfence", 0.02), ("xchg", 0.1), ("add", 0.2), ("dec", 0.19), ("jnz", 0.19)],
            0.05,
        ),
        s(
            "deepsjeng",
            &[("load", 0.31), ("mfence", 0.02), ("xchg", 0.1), ("add", 0.19), ("dec", 0.18), ("jnz", 0.2)],
            0.05,
        ),
    ]
}

/// Collapses the near-identical workloads of [`default_suite`].
pub fn default_grouping() -> LabelGrouping {
    default_suite()
        .iter()
        .map(|w| {
            let group = match w.label.as_str() {
                "perlbench" | "x264" => "perlbench+x264",
                "xalancbmk" | "leela" | "deepsjeng" => "xalancbmk+leela+deepsjeng",
                other => other,
            };
            (w.label.clone(), group.to_string())
        })
        .collect()
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> LatencyTable {
        LatencyTable::default()
    }

    fn means(spec: &WorkloadSpec, n: usize, seed: u64) -> Vec<f64> {
        let (s, _) = sample_traces(spec, &table(), &CoreConfig::default(), TRACE_PROBE_ITERATIONS, n, seed).unwrap();
        s.iter().map(TraceSample::mean).collect()
    }

    #[test]
    fn spec_validation() {
        let t = table();
        assert!(default_suite().iter().all(|w| w.validate(&t).is_ok()));
        assert!(WorkloadSpec::single("x", &[("add", 0.9)], 0.0).validate(&t).is_err());
        assert!(WorkloadSpec::single("x", &[("add", 1.0)], 1.5).validate(&t).is_err());
        assert!(WorkloadSpec::single("x", &[("bogus", 1.0)], 0.0).validate(&t).is_err());
        assert!(WorkloadSpec { label: "x".into(), phases: vec![] }.validate(&t).is_err());
    }

    #[test]
    fn stream_is_deterministic_and_phased() {
        let spec = WorkloadSpec {
            label: "p".into(),
            phases: vec![
                Phase { duration: 100, mix: [("nop".to_string(), 1.0)].into(), miss_rate: 0.0 },
                Phase { duration: 100, mix: [("xchg".to_string(), 1.0)].into(), miss_rate: 0.0 },
            ],
        };
        let mut a = synth_workload(&spec, &table(), 3).unwrap();
        let mut b = synth_workload(&spec, &table(), 3).unwrap();
        assert_eq!(a.next_program(0), b.next_program(0));
        assert!(a.next_program(50).iter().all(|i| i.name() == "nop"));
        assert!(a.next_program(150).iter().all(|i| i.name() == "xchg"));
        assert!(a.next_program(250).iter().all(|i| i.name() == "nop"));
    }

    #[test]
    fn traces_reflect_victim_retirement() {
        let nop = WorkloadSpec::single("nop", &[("nop", 1.0)], 0.0);
        let fence = WorkloadSpec::single("fence", &[("mfence", 1.0)], 0.0);
        let (s, cycles) = sample_traces(&nop, &table(), &CoreConfig::default(), 10, 1, 0).unwrap();
        assert_eq!(s[0].times.len(), TRACE_LEN);
        assert!(cycles > 0);
        let base = 45.0;
        assert!(s[0].times.iter().all(|&t| t as f64 >= base));
        assert!((s[0].mean() / base - 2.0).abs() < 0.1, "{}", s[0].mean());
        let f = means(&fence, 1, 0)[0];
        assert!(f / base < 1.1, "{f}");
    }

    #[test]
    fn label_does_not_change_times() {
        let mut w = default_suite()[1].clone();
        let a = means(&w, 1, 5);
        w.label = "renamed".into();
        assert_eq!(a, means(&w, 1, 5));
    }

    #[test]
    fn distinct_workloads_separate() {
        let suite = default_suite();
        let m: Vec<Vec<f64>> = suite[..6].iter().map(|w| means(w, 12, 1)).collect();
        for i in 0..6 {
            for j in i + 1..6 {
                let d = ks_distance(&m[i], &m[j]);
                assert!(d >= 0.9, "{} vs {}: {d}", suite[i].label, suite[j].label);
            }
        }
    }

    #[test]
    fn ks_basics() {
        assert_eq!(ks_distance(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(ks_distance(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
        assert!((ks_distance(&[1.0, 2.0, 3.0, 4.0], &[3.0, 4.0, 5.0, 6.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dataset_round_trip_and_grouping() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |l: &str, k: u64| TraceSample { label: l.into(), times: (0..TRACE_LEN as u64).map(|i| i + k).collect() };
        let samples = vec![mk("perlbench", 1), mk("x264", 2), mk("gcc", 3)];
        let p = dir.path().join("sub/d.csv");
        export_dataset(&samples, None, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().all(|l| l.split(',').count() == TRACE_LEN + 1));
        assert_eq!(read_dataset(&p).unwrap(), samples);
        let g = default_grouping();
        export_dataset(&samples, Some(&g), &p).unwrap();
        let labels: std::collections::BTreeSet<_> = read_dataset(&p).unwrap().into_iter().map(|s| s.label).collect();
        assert_eq!(labels.len(), 2);
        let partial: LabelGrouping = [("gcc".to_string(), "g".to_string())].into();
        assert!(export_dataset(&samples, Some(&partial), &p).is_err());
    }
}
