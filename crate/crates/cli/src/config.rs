use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use retsim::isa::{LatencyEntry, LatencyTable};
use retsim::pipeline::{ArbiterPolicy, CoreConfig, NoiseModel};
use retsim::spectre::SpectreConfig;
use retsim::workload::{default_suite, WorkloadSpec, TRACE_PROBE_ITERATIONS};
use retsim::DEFAULT_FREQUENCY_HZ;

/// Top-level experiment configuration, read from TOML.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub frequency_hz: f64,
    pub policy: ArbiterPolicy,
    pub seed: u64,
    /// Per-instruction replacements for the default latency table.
    pub latency: BTreeMap<String, LatencyEntry>,
    pub noise: NoiseModel,
    pub characterize: CharacterizeConfig,
    pub channel: ChannelGrid,
    pub spectre: SpectreRun,
    pub trace_gen: TraceGenConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            frequency_hz: DEFAULT_FREQUENCY_HZ,
            policy: ArbiterPolicy::Dynamic,
            seed: 1,
            latency: BTreeMap::new(),
            noise: NoiseModel::standard(),
            characterize: CharacterizeConfig::default(),
            channel: ChannelGrid::default(),
            spectre: SpectreRun::default(),
            trace_gen: TraceGenConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CharacterizeConfig {
    /// Nop-loop sizes for the bandwidth sweep.
    pub nop_sizes: Vec<u64>,
    /// Iterations of each serial and flush-load loop.
    pub loop_iterations: u64,
    pub flush_lines: u32,
    /// Receiver nop-loop iterations in the sharing experiment.
    pub receiver_iterations: u64,
    /// Slots per symbol for the receiver-time distributions.
    pub distribution_reps: usize,
}

impl Default for CharacterizeConfig {
    fn default() -> Self {
        Self {
            nop_sizes: (1..=10).map(|k| k * 1_000).collect(),
            loop_iterations: 100_000,
            flush_lines: 4,
            receiver_iterations: 10_000,
            distribution_reps: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelGrid {
    pub di_ts: Vec<u64>,
    pub di_receiver_iterations: Vec<u64>,
    pub si_ts: Vec<u64>,
    pub si_lines: Vec<u32>,
    pub rt: u64,
    pub symbols: usize,
    pub seeds: usize,
    pub calibration_reps: usize,
}

impl Default for ChannelGrid {
    fn default() -> Self {
        Self {
            di_ts: vec![10_000, 8_000, 6_000, 5_000, 4_000, 3_000],
            di_receiver_iterations: vec![50, 100],
            si_ts: vec![16_000, 14_000, 12_000, 10_000, 8_000, 6_000],
            si_lines: vec![60, 70],
            rt: 50_000,
            symbols: 2_000,
            seeds: 3,
            calibration_reps: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectreRun {
    pub attack: SpectreConfig,
    /// Secret bits per seed.
    pub bits: usize,
    pub seeds: usize,
    /// Attacks whose raw probe times are dumped.
    pub dump_attacks: usize,
}

impl Default for SpectreRun {
    fn default() -> Self {
        Self { attack: SpectreConfig::default(), bits: 200, seeds: 3, dump_attacks: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceGenConfig {
    pub samples_per_label: usize,
    pub probe_iterations: u64,
    /// Empty means the built-in ten-workload suite.
    pub workloads: Vec<WorkloadSpec>,
    /// Collapse the built-in confusable workloads into groups.
    pub grouping: bool,
}

impl Default for TraceGenConfig {
    fn default() -> Self {
        Self {
            samples_per_label: 600,
            probe_iterations: TRACE_PROBE_ITERATIONS,
            workloads: Vec::new(),
            grouping: false,
        }
    }
}

impl TraceGenConfig {
    pub fn suite(&self) -> Vec<WorkloadSpec> {
        if self.workloads.is_empty() {
            default_suite()
        } else {
            self.workloads.clone()
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    pub fn table(&self) -> Result<LatencyTable> {
        Ok(LatencyTable::default().with_overrides(&self.latency)?)
    }

    pub fn core(&self) -> Result<CoreConfig> {
        let table = self.table()?;
        let core = CoreConfig::from_table(&table).with_policy(self.policy).with_noise(self.noise.clone());
        core.validate()?;
        Ok(core)
    }

    /// Checks everything a subcommand could trip over before any
    /// simulation starts.
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency_hz > 0.0 && self.frequency_hz.is_finite()) {
            bail!("frequency_hz must be positive");
        }
        let table = self.table()?;
        self.core()?;
        let c = &self.characterize;
        if c.nop_sizes.is_empty() || c.nop_sizes.contains(&0) {
            bail!("characterize.nop_sizes must be non-empty and positive");
        }
        if c.loop_iterations == 0 || c.flush_lines == 0 || c.receiver_iterations == 0 {
            bail!("characterize loop sizes must be positive");
        }
        if c.distribution_reps < 100 {
            bail!("characterize.distribution_reps must be at least 100");
        }
        let g = &self.channel;
        if g.di_ts.is_empty() && g.si_ts.is_empty() {
            bail!("channel grid is empty");
        }
        if (!g.di_ts.is_empty() && g.di_receiver_iterations.is_empty())
            || (!g.si_ts.is_empty() && g.si_lines.is_empty())
        {
            bail!("channel grid is empty");
        }
        if g.di_ts.iter().chain(&g.si_ts).any(|&t| t == 0) || g.rt == 0 {
            bail!("channel ts and rt must be positive");
        }
        if g.symbols == 0 || g.seeds == 0 {
            bail!("channel.symbols and channel.seeds must be positive");
        }
        if g.calibration_reps < 100 {
            bail!("channel.calibration_reps must be at least 100");
        }
        let s = &self.spectre;
        s.attack.validate()?;
        if s.bits == 0 || s.seeds == 0 {
            bail!("spectre.bits and spectre.seeds must be positive");
        }
        let t = &self.trace_gen;
        if t.samples_per_label == 0 || t.probe_iterations == 0 {
            bail!("trace_gen sizes must be positive");
        }
        for w in t.suite() {
            w.validate(&table)?;
        }
        if t.grouping && !t.workloads.is_empty() {
            bail!("trace_gen.grouping applies only to the built-in suite");
        }
        Ok(())
    }
}
