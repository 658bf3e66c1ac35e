//! Retirement characterization: bandwidth, per-instruction usage, memory
//! stalls, dynamic sharing, and receiver-time distributions.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;

use retsim::channel::{self, ChannelConfig, ChannelParams, Variant};
use retsim::counters::usage_series;
use retsim::isa::{build_flush_load_loop, build_nop_loop, build_serial_loop, LatencyTable, Program};
use retsim::pipeline::{run_program, ArbiterPolicy, Core, CoreConfig, Job, NoiseModel, ThreadId};
use retsim::Cycle;

use crate::config::ExperimentConfig;
use crate::{write_file, Check};

const BUDGET: Cycle = 1 << 40;

pub const USAGE_ORDER: [&str; 5] = ["nop", "add", "adc", "xchg", "mfence"];

/// One solo nop-loop measurement.
#[derive(Clone, Copy, Debug)]
pub struct NopRun {
    pub iterations: u64,
    pub uops: u64,
    pub cycles: u64,
    pub retire_active: u64,
    pub retire_stall: u64,
    pub frontend_active: u64,
}

pub fn nop_bandwidth(core: &CoreConfig, iterations: u64) -> Result<NopRun> {
    let p = build_nop_loop(iterations)?;
    let r = run_program(core, [Some(&p), None], BUDGET, 0)?;
    let c = r.counters[0];
    Ok(NopRun {
        iterations,
        uops: c.uops_retired,
        cycles: r.finish[0].unwrap_or(c.cycles),
        retire_active: c.retire_active_cycles,
        retire_stall: c.retire_stall_cycles,
        frontend_active: c.frontend_active_cycles,
    })
}

/// `(retirement usage, stall ratio)` of a solo serial loop.
pub fn serial_usage(core: &CoreConfig, table: &LatencyTable, name: &str, iterations: u64) -> Result<(f64, f64)> {
    let p = build_serial_loop(&table.instruction(name, None)?, iterations, table)?;
    let c = run_program(core, [Some(&p), None], BUDGET, 0)?.counters[0];
    Ok((c.retirement_usage(), c.stall_ratio()))
}

/// `(usage, miss rate)` of a solo flush-load loop.
pub fn flush_load_usage(
    core: &CoreConfig,
    table: &LatencyTable,
    lines: u32,
    same_address: bool,
    iterations: u64,
) -> Result<(f64, f64)> {
    let p = build_flush_load_loop(lines, same_address, iterations, table)?;
    let c = run_program(core, [Some(&p), None], BUDGET, 0)?.counters[0];
    Ok((c.retirement_usage(), c.miss_rate()))
}

/// Receiver nop-loop beside a sender that keeps running until after the
/// receiver is done. Returns the receiver's `(execution cycles,
/// retire-active cycles)`.
pub fn sharing(core: &CoreConfig, receiver: &Program, sender: &Program) -> Result<(Cycle, u64)> {
    let mut c = Core::new(core.clone(), 0);
    c.push(ThreadId::T0, Job::run(sender.clone(), 0));
    c.push(ThreadId::T1, Job::run(receiver.clone(), 0));
    c.run_to_completion(BUDGET);
    let rec = c.records(ThreadId::T1)[0];
    let sender_end = c.records(ThreadId::T0)[0].end;
    anyhow::ensure!(sender_end >= rec.end, "sender finished before the receiver");
    Ok((rec.duration(), c.counters(ThreadId::T1).retire_active_cycles))
}

/// Senders for the sharing experiment, sized to outlast the receiver.
pub fn sharing_senders(table: &LatencyTable, receiver_iterations: u64) -> Result<Vec<(&'static str, Program)>> {
    Ok(vec![
        ("nop", build_nop_loop(receiver_iterations * 3)?),
        ("xchg", build_serial_loop(&table.instruction("xchg", None)?, receiver_iterations * 2, table)?),
    ])
}

pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Check>> {
    let table = cfg.table()?;
    let quiet = cfg.core()?.with_noise(NoiseModel::default()).with_policy(ArbiterPolicy::Dynamic);
    let cc = &cfg.characterize;
    let mut checks = Vec::new();

    let mut csv = String::from("iterations,uops,cycles,cycles_per_uop,retire_active,retire_stall,frontend_active\n");
    let mut worst = 0.0f64;
    let mut fe_ok = true;
    for &n in &cc.nop_sizes {
        let r = nop_bandwidth(&quiet, n)?;
        let cpu = r.cycles as f64 / r.uops as f64;
        worst = worst.max((cpu - 0.25).abs() / 0.25);
        fe_ok &= (r.frontend_active as f64) < 0.7 * r.cycles as f64;
        writeln!(
            csv,
            "{},{},{},{:.6},{},{},{}",
            r.iterations, r.uops, r.cycles, cpu, r.retire_active, r.retire_stall, r.frontend_active
        )?;
    }
    write_file(&out.join("bandwidth.csv"), &csv)?;
    checks.push(Check::new("retirement bandwidth 0.25 cycles/uop", worst <= 0.02, format!("worst deviation {:.3}%", worst * 100.0)));
    checks.push(Check::new("frontend not the bottleneck", fe_ok, "frontend_active < 0.7 x cycles".into()));

    let mut csv = String::from("instruction,iterations,retirement_usage,stall_ratio\n");
    let mut stalls = Vec::new();
    for name in USAGE_ORDER {
        let (usage, stall) = serial_usage(&quiet, &table, name, cc.loop_iterations)?;
        writeln!(csv, "{name},{},{usage:.6},{stall:.6}", cc.loop_iterations)?;
        stalls.push(stall);
    }
    write_file(&out.join("usage.csv"), &csv)?;
    let ordered = stalls[0] < stalls[1] && stalls[1] <= stalls[2] && stalls[2] < stalls[3] && stalls[3] < stalls[4];
    checks.push(Check::new("instruction ordering nop<add<=adc<xchg<mfence", ordered, format!("{stalls:.4?}")));

    let (hit, hit_mr) = flush_load_usage(&quiet, &table, cc.flush_lines, false, cc.loop_iterations / 10)?;
    let (miss, miss_mr) = flush_load_usage(&quiet, &table, cc.flush_lines, true, cc.loop_iterations / 10)?;
    write_file(
        &out.join("memory.csv"),
        &format!("variant,lines,retirement_usage,miss_rate\nhit,{l},{hit:.6},{hit_mr:.6}\nmiss,{l},{miss:.6},{miss_mr:.6}\n", l = cc.flush_lines),
    )?;
    let ratio = hit / miss;
    checks.push(Check::new("hit/miss usage ratio >= 3", ratio >= 3.0, format!("ratio {ratio:.3}")));

    let receiver = build_nop_loop(cc.receiver_iterations)?;
    let mut csv = String::from("policy,sender,receiver_cycles,receiver_retire_active\n");
    let mut by_policy = Vec::new();
    for policy in [ArbiterPolicy::Dynamic, ArbiterPolicy::Static] {
        let core = quiet.clone().with_policy(policy);
        let mut rows = Vec::new();
        for (name, sender) in sharing_senders(&table, cc.receiver_iterations)? {
            let (time, active) = sharing(&core, &receiver, &sender)?;
            writeln!(csv, "{},{name},{time},{active}", policy_name(policy))?;
            rows.push((time, active));
        }
        by_policy.push(rows);
    }
    write_file(&out.join("sharing.csv"), &csv)?;
    let d = &by_policy[0];
    let active_diff = (d[0].1 as f64 - d[1].1 as f64).abs() / d[1].1 as f64;
    let time_diff = (d[0].0 as f64 - d[1].0 as f64).abs() / d[1].0 as f64;
    checks.push(Check::new(
        "dynamic sharing: same work, different time",
        active_diff <= 0.01 && time_diff > 0.2,
        format!("retire_active diff {:.3}%, time diff {:.1}%", active_diff * 100.0, time_diff * 100.0),
    ));
    let s = &by_policy[1];
    checks.push(Check::new("static partitioning hides the sender", s[0].0 == s[1].0, format!("{} vs {}", s[0].0, s[1].0)));

    let noisy = cfg.core()?;
    let mut csv = String::from("variant,symbol,rep,time\n");
    for params in [ChannelParams::di(10_000, 100), ChannelParams::si(20_000, 60)] {
        let ch = ChannelConfig::new(&ChannelParams { frequency_hz: cfg.frequency_hz, ..params }, &table, noisy.clone())?;
        let k = ch.variant.alphabet();
        let message: Vec<u8> = (0..cc.distribution_reps * k).map(|i| (i % k) as u8).collect();
        let run = channel::run_slots(&ch, &message, cfg.seed)?;
        for (i, (m, t)) in message.iter().zip(run.receiver_times()).enumerate() {
            writeln!(csv, "{},{m},{},{t}", ch.variant.as_str(), i / k)?;
        }
        if ch.variant == Variant::Di {
            let mut core = Core::new(noisy.clone(), cfg.seed);
            let t0 = channel::compute_time_start(0, ch.rt)?;
            let msg = channel::random_message(Variant::Di, 50, cfg.seed);
            core.push_all(channel::SENDER, channel::sender_jobs(&ch, &msg, t0)?);
            core.push_all(channel::RECEIVER, channel::receiver_jobs(&ch, msg.len(), t0));
            core.run_until(t0);
            let mut det = String::from("window,mean_usage,max_usage\n");
            let slot = usage_series(&mut core, channel::RECEIVER, ch.ts, 20 * ch.ts)?;
            let mut fine = usage_series(&mut core, channel::RECEIVER, 1_000, 20 * ch.ts)?;
            fine.start = slot.start + 20 * ch.ts;
            writeln!(det, "{},{:.6},{:.6}", ch.ts, slot.mean(), slot.max())?;
            writeln!(det, "1000,{:.6},{:.6}", fine.mean(), fine.max())?;
            write_file(&out.join("detection.csv"), &det)?;
            fine.write_csv(&out.join("receiver_usage_1000.csv"))?;
        }
    }
    write_file(&out.join("distributions.csv"), &csv)?;
    Ok(checks)
}

pub fn policy_name(p: ArbiterPolicy) -> &'static str {
    match p {
        ArbiterPolicy::Dynamic => "dynamic",
        ArbiterPolicy::Static => "static",
    }
}
