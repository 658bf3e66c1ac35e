//! Experiment driver for the retsim simulator.

pub mod characterize;
pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use retsim::channel::{self, ChannelConfig, ChannelParams, Variant};
use retsim::pipeline::NoiseModel;
use retsim::rng;
use retsim::spectre::{self, Programs};
use retsim::workload::{self, Manifest, TRACE_LEN};

use crate::config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "retsim", version, about = "Retirement-contention SMT simulator and attack harness")]
pub struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured base seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for independent simulations.
    #[arg(long, global = true)]
    pub parallel: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Retirement bandwidth, per-instruction usage, sharing and timing distributions.
    Characterize,
    /// DI/SI covert-channel accuracy and bandwidth grid.
    ChannelEval,
    /// Spectre variant campaigns.
    Spectre,
    /// Labeled program-inference traces plus manifest.
    TraceGen,
}

/// A named pass/fail property in a report.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, pass: bool, detail: String) -> Self {
        Self { name: name.to_string(), pass, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// How a successful invocation ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    PropertyFailure,
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Loads and validates the configuration, applying flag overrides.
pub fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(command: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match command {
        Command::Characterize => {
            let checks = characterize::run(cfg, out)?;
            let mut summary = String::new();
            for c in &checks {
                writeln!(summary, "{}", c.line())?;
            }
            write_file(&out.join("summary.txt"), &summary)?;
            print!("{summary}");
            Ok(if checks.iter().all(|c| c.pass) { Outcome::Ok } else { Outcome::PropertyFailure })
        }
        Command::ChannelEval => cmd_channel_eval(cfg, out),
        Command::Spectre => cmd_spectre(cfg, out),
        Command::TraceGen => cmd_trace_gen(cfg, out),
    }
}

struct GridPoint {
    variant: Variant,
    param: u64,
    ts: Vec<u64>,
}

/// Calibrates each channel configuration once, then evaluates it at every
/// Ts of the grid for every seed. Rows come out in grid order.
pub fn cmd_channel_eval(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let table = cfg.table()?;
    let core = cfg.core()?;
    let g = &cfg.channel;
    let mut points = Vec::new();
    for &n in &g.di_receiver_iterations {
        if !g.di_ts.is_empty() {
            points.push(GridPoint { variant: Variant::Di, param: n, ts: g.di_ts.clone() });
        }
    }
    for &l in &g.si_lines {
        if !g.si_ts.is_empty() {
            points.push(GridPoint { variant: Variant::Si, param: l as u64, ts: g.si_ts.clone() });
        }
    }
    let calibrated: Vec<Result<ChannelConfig, String>> = points
        .par_iter()
        .map(|p| {
            let ts = *p.ts.iter().max().expect("non-empty");
            let params = match p.variant {
                Variant::Di => ChannelParams::di(ts, p.param),
                Variant::Si => ChannelParams::si(ts, p.param as u32),
            };
            let params = ChannelParams { rt: g.rt, frequency_hz: cfg.frequency_hz, ..params };
            let ch = ChannelConfig::new(&params, &table, core.clone()).map_err(|e| e.to_string())?;
            channel::calibrate(&ch, g.calibration_reps, cfg.seed).map_err(|e| e.to_string())
        })
        .collect();
    let mut jobs = Vec::new();
    for (p, c) in points.iter().zip(&calibrated) {
        for &ts in &p.ts {
            for k in 0..g.seeds {
                jobs.push((p, c, ts, k));
            }
        }
    }
    let rows: Vec<String> = jobs
        .par_iter()
        .map(|&(p, c, ts, k)| {
            let seed = rng::derive(cfg.seed, k as u64);
            let lead = format!("{},{ts},{},{seed}", p.variant.as_str(), p.param);
            match c {
                Ok(ch) => {
                    let ch = ch.clone().with_ts(ts);
                    let msg = channel::random_message(p.variant, g.symbols, seed);
                    let r = channel::evaluate_channel(&ch, &msg, seed).map_err(anyhow::Error::from)?;
                    Ok(format!("{lead},{:.6},{:.3},{},ok", r.accuracy, r.bandwidth, ch.slot_work.unwrap_or(0)))
                }
                Err(e) => {
                    eprintln!("{} {}: {e}", p.variant.as_str(), p.param);
                    let bw = p.variant.len() as f64 * cfg.frequency_hz / ts as f64;
                    Ok(format!("{lead},,{bw:.3},,calibration-failure"))
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut csv = String::from("variant,ts,iterations_or_lines,seed,accuracy,bandwidth_bits_per_s,slot_work,status\n");
    for r in rows {
        csv.push_str(&r);
        csv.push('\n');
    }
    write_file(&out.join("channel.csv"), &csv)?;
    Ok(Outcome::Ok)
}

/// Noise-free and noisy campaigns per seed, plus a raw probe dump.
pub fn cmd_spectre(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let table = cfg.table()?;
    let noisy = cfg.core()?;
    let s = &cfg.spectre;
    let attack = spectre::SpectreConfig { frequency_hz: cfg.frequency_hz, ..s.attack.clone() };
    let mut jobs = Vec::new();
    for k in 0..s.seeds {
        for noise in [false, true] {
            jobs.push((k, noise));
        }
    }
    let rows: Vec<String> = jobs
        .par_iter()
        .map(|&(k, noise)| -> Result<String> {
            let seed = rng::derive(cfg.seed, k as u64);
            let core = if noise { noisy.clone() } else { noisy.clone().with_noise(NoiseModel::default()) };
            let secret = spectre::random_secret(s.bits, seed);
            let r = spectre::run_campaign(&secret, &attack, &table, &core, seed)?;
            Ok(format!(
                "{seed},{},{},{:.6},{:.6},{},{:.3},{:.6},{:.6},{:.3}",
                if noise { "on" } else { "off" },
                attack.votes,
                r.accuracy,
                r.single_attack_accuracy,
                r.erasures,
                r.bandwidth,
                r.victim.miss_rate(),
                r.attacker.miss_rate(),
                r.decoder.threshold
            ))
        })
        .collect::<Result<_>>()?;
    let mut csv = String::from(
        "seed,noise,votes,accuracy,single_attack_accuracy,erasures,bandwidth_bits_per_s,victim_miss_rate,attacker_miss_rate,threshold\n",
    );
    for r in rows {
        csv.push_str(&r);
        csv.push('\n');
    }
    write_file(&out.join("spectre.csv"), &csv)?;

    if s.dump_attacks > 0 {
        let programs = Programs::new(&attack, &table)?;
        let bits = spectre::random_secret(s.dump_attacks, cfg.seed);
        let run = spectre::run_attacks(&attack, &programs, &noisy, &bits, cfg.seed)?;
        let mut csv = String::from("attack,bit,probe,time\n");
        for (i, (b, times)) in bits.iter().zip(&run.probe_times).enumerate() {
            for (j, t) in times.iter().enumerate() {
                writeln!(csv, "{i},{b},{j},{t}")?;
            }
        }
        write_file(&out.join("spectre_probes.csv"), &csv)?;
    }
    Ok(Outcome::Ok)
}

/// Samples every workload and writes `dataset.csv` and `manifest.json`.
pub fn cmd_trace_gen(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let table = cfg.table()?;
    let core = cfg.core()?;
    let t = &cfg.trace_gen;
    let suite = t.suite();
    let seeds: Vec<u64> = (0..suite.len()).map(|i| rng::derive(cfg.seed, i as u64)).collect();
    let runs = suite
        .par_iter()
        .zip(&seeds)
        .map(|(w, &seed)| workload::sample_traces(w, &table, &core, t.probe_iterations, t.samples_per_label, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let grouping = t.grouping.then(workload::default_grouping);
    let mut samples = Vec::new();
    let mut counts = BTreeMap::new();
    let mut cycles = BTreeMap::new();
    for (w, (s, c)) in suite.iter().zip(runs) {
        counts.insert(w.label.clone(), s.len());
        cycles.insert(w.label.clone(), c);
        samples.extend(s);
    }
    workload::export_dataset(&samples, grouping.as_ref(), &out.join("dataset.csv"))?;
    let manifest = Manifest {
        dataset: "dataset.csv".into(),
        trace_len: TRACE_LEN,
        probe_iterations: t.probe_iterations,
        windows: "non-overlapping".into(),
        samples_per_label: t.samples_per_label,
        labels: suite.iter().map(|w| w.label.clone()).collect(),
        seeds: suite.iter().map(|w| w.label.clone()).zip(seeds).collect(),
        counts,
        cycles_simulated: cycles,
        grouping,
        workloads: suite,
    };
    manifest.write(&out.join("manifest.json"))?;
    Ok(Outcome::Ok)
}

/// Runs a parsed command line; errors are configuration or usage problems.
pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = load_config(cli)?;
    let threads = cli.parallel.unwrap_or(1).max(1);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    pool.install(|| execute(cli.command, &cfg, &cli.out))
}
