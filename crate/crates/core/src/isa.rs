//! Abstract instruction vocabulary and the loop programs used by every
//! experiment.
//!
//! Instructions carry only what matters to retirement: how many µops they
//! decode to, how long they take to execute, whether consecutive instances
//! form a dependency chain, and which abstract cache line they touch.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Abstract cache-line address.
pub type Addr = u64;

/// Stride between abstract cache lines.
pub const LINE_SIZE: Addr = 64;

/// µops in one nop-loop body (three 32-byte blocks, three DSB lines each).
pub const NOP_LOOP_UOPS: u64 = 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstKind {
    Nop,
    Alu,
    Load,
    Flush,
    Fence,
    Branch,
}

impl InstKind {
    pub fn is_memory(self) -> bool {
        matches!(self, InstKind::Load | InstKind::Flush)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionSpec {
    name: Arc<str>,
    uop_count: u32,
    exec_latency: u32,
    kind: InstKind,
    serial: bool,
    mem_addr: Option<Addr>,
}

impl InstructionSpec {
    pub fn new(
        name: &str,
        kind: InstKind,
        uop_count: u32,
        exec_latency: u32,
        serial: bool,
        mem_addr: Option<Addr>,
    ) -> Result<Self> {
        if uop_count == 0 {
            return Err(invalid(format!("{name}: uop_count must be at least 1")));
        }
        if kind == InstKind::Nop && (exec_latency != 0 || uop_count != 1) {
            return Err(invalid(format!("{name}: a nop is one µop with zero latency")));
        }
        if kind.is_memory() != mem_addr.is_some() {
            return Err(invalid(format!(
                "{name}: an address is required for loads and flushes and forbidden otherwise"
            )));
        }
        Ok(Self { name: name.into(), uop_count, exec_latency, kind, serial, mem_addr })
    }

    pub fn nop() -> Self {
        Self {
            name: "nop".into(),
            uop_count: 1,
            exec_latency: 0,
            kind: InstKind::Nop,
            serial: false,
            mem_addr: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn uop_count(&self) -> u32 {
        self.uop_count
    }

    pub fn exec_latency(&self) -> u32 {
        self.exec_latency
    }

    pub fn kind(&self) -> InstKind {
        self.kind
    }

    pub fn serial(&self) -> bool {
        self.serial
    }

    pub fn mem_addr(&self) -> Option<Addr> {
        self.mem_addr
    }

    /// Same instruction, different serial flag.
    pub fn with_serial(mut self, serial: bool) -> Self {
        self.serial = serial;
        self
    }

    /// Same memory instruction aimed at another line.
    pub fn at(mut self, addr: Addr) -> Self {
        debug_assert!(self.kind.is_memory());
        self.mem_addr = Some(addr);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyEntry {
    pub kind: InstKind,
    pub uop_count: u32,
    pub exec_latency: u32,
    #[serde(default)]
    pub serial: bool,
}

/// Per-instruction µop counts and latencies.
///
/// Loads have two entries: `load` (hit) and `load-miss`; the cache decides
/// which one applies at run time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatencyTable {
    entries: BTreeMap<String, LatencyEntry>,
}

/// Names that every built loop relies on.
pub const REQUIRED_ENTRIES: [&str; 11] = [
    "nop", "add", "adc", "xchg", "mfence", "load", "load-miss", "flush", "dec", "jnz", "rdtsc",
];

impl Default for LatencyTable {
    fn default() -> Self {
        default_latency_table()
    }
}

/// The documented default table.
///
/// ALU latencies are chain latencies as seen by retirement, picked so that
/// each of nop/add/adc/xchg puts a distinct load on a shared retirement
/// stage: a dependency chain shorter than two cycles keeps its thread
/// permanently ready under alternating arbitration, so add and adc sit
/// above that point and below xchg.
pub fn default_latency_table() -> LatencyTable {
    use InstKind::*;
    let rows: [(&str, InstKind, u32, u32, bool); 11] = [
        ("nop", Nop, 1, 0, false),
        ("add", Alu, 1, 3, true),
        ("adc", Alu, 1, 5, true),
        ("xchg", Alu, 1, 9, true),
        ("mfence", Fence, 1, 33, true),
        ("load", Load, 1, 4, false),
        ("load-miss", Load, 1, 200, false),
        ("flush", Flush, 1, 1, false),
        ("dec", Alu, 1, 1, false),
        ("jnz", Branch, 1, 1, false),
        ("rdtsc", Alu, 1, 25, false),
    ];
    let entries = rows
        .iter()
        .map(|&(name, kind, uop_count, exec_latency, serial)| {
            (name.to_string(), LatencyEntry { kind, uop_count, exec_latency, serial })
        })
        .collect();
    LatencyTable { entries }
}

impl LatencyTable {
    pub fn lookup(&self, name: &str) -> Option<LatencyEntry> {
        self.entries.get(name).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &LatencyEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Replaces or adds entries; the merged table is re-validated.
    pub fn with_overrides(&self, overrides: &BTreeMap<String, LatencyEntry>) -> Result<Self> {
        let mut merged = self.clone();
        for (name, entry) in overrides {
            merged.entries.insert(name.clone(), *entry);
        }
        merged.validate()?;
        Ok(merged)
    }

    pub fn validate(&self) -> Result<()> {
        for name in REQUIRED_ENTRIES {
            if !self.entries.contains_key(name) {
                return Err(invalid(format!("latency table is missing `{name}`")));
            }
        }
        for (name, e) in &self.entries {
            if e.uop_count == 0 {
                return Err(invalid(format!("{name}: uop_count must be at least 1")));
            }
            if e.kind == InstKind::Nop && (e.exec_latency != 0 || e.uop_count != 1) {
                return Err(invalid(format!("{name}: a nop is one µop with zero latency")));
            }
        }
        let lat = |n: &str| self.entries[n].exec_latency;
        let ordered = lat("nop") < lat("add")
            && lat("add") <= lat("adc")
            && lat("adc") < lat("xchg")
            && lat("xchg") < lat("mfence");
        if !ordered {
            return Err(invalid("latencies must satisfy nop < add <= adc < xchg < mfence"));
        }
        if lat("load") >= lat("load-miss") {
            return Err(invalid("a load hit must be faster than a miss"));
        }
        Ok(())
    }

    /// Instruction for a named entry. Memory instructions need `addr`.
    pub fn instruction(&self, name: &str, addr: Option<Addr>) -> Result<InstructionSpec> {
        let e = self.lookup(name).ok_or_else(|| invalid(format!("unknown instruction `{name}`")))?;
        InstructionSpec::new(name, e.kind, e.uop_count, e.exec_latency, e.serial, addr)
    }

    pub fn hit_latency(&self) -> u32 {
        self.entries["load"].exec_latency
    }

    pub fn miss_latency(&self) -> u32 {
        self.entries["load-miss"].exec_latency
    }
}

#[derive(Debug, PartialEq, Eq)]
struct Body {
    insts: Vec<InstructionSpec>,
    /// Dependency-chain slot per instruction; serial instructions sharing a
    /// name share a chain.
    chains: Vec<Option<u16>>,
    num_chains: usize,
    uops: u64,
}

/// An immutable instruction sequence: `body` repeated `iterations` times.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    label: Arc<str>,
    body: Arc<Body>,
    iterations: u64,
}

impl Program {
    pub fn new(label: &str, insts: Vec<InstructionSpec>) -> Result<Self> {
        Self::looped(label, insts, 1)
    }

    pub fn looped(label: &str, insts: Vec<InstructionSpec>, iterations: u64) -> Result<Self> {
        if insts.is_empty() {
            return Err(invalid(format!("{label}: empty program")));
        }
        if iterations == 0 {
            return Err(invalid(format!("{label}: iterations must be at least 1")));
        }
        let mut names: Vec<&str> = Vec::new();
        let chains = insts
            .iter()
            .map(|i| {
                i.serial.then(|| match names.iter().position(|n| *n == i.name()) {
                    Some(p) => p as u16,
                    None => {
                        names.push(i.name());
                        (names.len() - 1) as u16
                    }
                })
            })
            .collect();
        let num_chains = names.len();
        let uops = insts.iter().map(|i| i.uop_count as u64).sum();
        Ok(Self {
            label: label.into(),
            body: Arc::new(Body { insts, chains, num_chains, uops }),
            iterations,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn body(&self) -> &[InstructionSpec] {
        &self.body.insts
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    /// Dynamic instruction count.
    pub fn len(&self) -> u64 {
        self.body.insts.len() as u64 * self.iterations
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn uop_count(&self) -> u64 {
        self.body.uops * self.iterations
    }

    pub fn num_chains(&self) -> usize {
        self.body.num_chains
    }

    pub(crate) fn chain_of(&self, body_index: usize) -> Option<u16> {
        self.body.chains[body_index]
    }

    /// Every dynamic instruction in program order.
    pub fn iter(&self) -> impl Iterator<Item = &InstructionSpec> + '_ {
        (0..self.iterations).flat_map(move |_| self.body.insts.iter())
    }
}

fn loop_control(table: &LatencyTable) -> Result<[InstructionSpec; 2]> {
    Ok([table.instruction("dec", None)?, table.instruction("jnz", None)?])
}

/// The retirement-bound probe: 18 nop µops per iteration.
pub fn build_nop_loop(iterations: u64) -> Result<Program> {
    if iterations == 0 {
        return Err(invalid("nop-loop needs at least one iteration"));
    }
    let body = vec![InstructionSpec::nop(); NOP_LOOP_UOPS as usize];
    Program::looped("nop-loop", body, iterations)
}

/// Target instruction plus a two-µop loop-control pair per iteration;
/// consecutive target instances depend on each other.
pub fn build_serial_loop(
    inst: &InstructionSpec,
    iterations: u64,
    table: &LatencyTable,
) -> Result<Program> {
    if inst.kind().is_memory() || matches!(inst.kind(), InstKind::Branch) {
        return Err(invalid(format!(
            "{}: serial loops take nop, alu or fence instructions",
            inst.name()
        )));
    }
    if iterations == 0 {
        return Err(invalid("serial loop needs at least one iteration"));
    }
    let [dec, jnz] = loop_control(table)?;
    let target = inst.clone().with_serial(inst.kind() != InstKind::Nop);
    Program::looped(&format!("{}-loop", inst.name()), vec![target, dec, jnz], iterations)
}

/// Cache lines used by a flush-load loop rooted at `base`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LineSet {
    pub base: Addr,
    pub lines: u32,
}

impl LineSet {
    pub fn addr(&self, i: u32) -> Addr {
        self.base + i as Addr * LINE_SIZE
    }

    pub fn addrs(&self) -> impl Iterator<Item = Addr> + '_ {
        (0..self.lines).map(|i| self.addr(i))
    }
}

pub const FLUSH_REGION: Addr = 0x10_0000;
pub const LOAD_REGION: Addr = 0x20_0000;

/// Flush-load loop on the default address regions.
pub fn build_flush_load_loop(
    num_lines: u32,
    same_address: bool,
    iterations: u64,
    table: &LatencyTable,
) -> Result<Program> {
    build_flush_load_loop_at(FLUSH_REGION, LOAD_REGION, num_lines, same_address, iterations, table)
}

/// Independent pointer chains walked by a flush-load loop; line `i` belongs
/// to chain `i % FLUSH_LOAD_CHAINS`.
pub const FLUSH_LOAD_CHAINS: u32 = 3;

/// Each iteration flushes `num_lines` lines starting at `flush_base`, then
/// walks `num_lines` loads as [`FLUSH_LOAD_CHAINS`] interleaved dependent
/// chains. With `same_address` the loads hit the freshly flushed lines and
/// miss; otherwise they read the disjoint lines at `load_base`, which stay
/// resident after first touch.
pub fn build_flush_load_loop_at(
    flush_base: Addr,
    load_base: Addr,
    num_lines: u32,
    same_address: bool,
    iterations: u64,
    table: &LatencyTable,
) -> Result<Program> {
    if num_lines == 0 {
        return Err(invalid("flush-load loop needs at least one line"));
    }
    if iterations == 0 {
        return Err(invalid("flush-load loop needs at least one iteration"));
    }
    let flushed = LineSet { base: flush_base, lines: num_lines };
    let loaded = if same_address { flushed } else { LineSet { base: load_base, lines: num_lines } };
    let [dec, jnz] = loop_control(table)?;
    let load = table.lookup("load").ok_or_else(|| invalid("latency table has no load"))?;
    let mut body = Vec::with_capacity(num_lines as usize * 4);
    for a in flushed.addrs() {
        body.push(table.instruction("flush", Some(a))?);
    }
    for (i, a) in loaded.addrs().enumerate() {
        let chain = format!("load/{}", i as u32 % FLUSH_LOAD_CHAINS);
        body.push(InstructionSpec::new(&chain, load.kind, load.uop_count, load.exec_latency, true, Some(a))?);
        body.push(dec.clone());
        body.push(jnz.clone());
    }
    let label = if same_address { "flush-load-miss" } else { "flush-load-hit" };
    Program::looped(label, body, iterations)
}

/// One load per line; brings a line set into the cache.
pub fn build_touch(lines: LineSet, table: &LatencyTable) -> Result<Program> {
    let body = lines
        .addrs()
        .map(|a| table.instruction("load", Some(a)))
        .collect::<Result<Vec<_>>>()?;
    Program::new("touch", body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nop_loop_shapes() {
        let p = build_nop_loop(1).unwrap();
        assert_eq!(p.uop_count(), 18);
        assert!(p.iter().all(|i| i.kind() == InstKind::Nop && !i.serial()));
        assert_eq!(build_nop_loop(100).unwrap().uop_count(), 1800);
        assert!(build_nop_loop(0).is_err());
    }

    #[test]
    fn instruction_invariants() {
        assert!(InstructionSpec::new("x", InstKind::Nop, 1, 1, false, None).is_err());
        assert!(InstructionSpec::new("x", InstKind::Nop, 2, 0, false, None).is_err());
        assert!(InstructionSpec::new("x", InstKind::Alu, 0, 1, false, None).is_err());
        assert!(InstructionSpec::new("x", InstKind::Load, 1, 4, false, None).is_err());
        assert!(InstructionSpec::new("x", InstKind::Alu, 1, 1, false, Some(0)).is_err());
        assert!(InstructionSpec::new("x", InstKind::Flush, 1, 1, false, Some(64)).is_ok());
    }

    #[test]
    fn default_table_values() {
        let t = default_latency_table();
        t.validate().unwrap();
        let nop = t.lookup("nop").unwrap();
        assert_eq!((nop.uop_count, nop.exec_latency), (1, 0));
        assert!(t.lookup("mfence").unwrap().exec_latency > t.lookup("xchg").unwrap().exec_latency);
        assert_eq!(t, default_latency_table());
    }

    #[test]
    fn overrides_are_validated() {
        let t = default_latency_table();
        let mut o = BTreeMap::new();
        o.insert(
            "xchg".to_string(),
            LatencyEntry { kind: InstKind::Alu, uop_count: 1, exec_latency: 50, serial: true },
        );
        assert!(t.with_overrides(&o).is_err());
        o.insert(
            "xchg".to_string(),
            LatencyEntry { kind: InstKind::Alu, uop_count: 1, exec_latency: 12, serial: true },
        );
        assert_eq!(t.with_overrides(&o).unwrap().lookup("xchg").unwrap().exec_latency, 12);
    }

    #[test]
    fn serial_loop_structure() {
        let t = default_latency_table();
        let xchg = t.instruction("xchg", None).unwrap();
        let p = build_serial_loop(&xchg, 10, &t).unwrap();
        assert_eq!(p.uop_count(), 30);
        assert_eq!(p.num_chains(), 1);
        assert_eq!(p.chain_of(0), Some(0));
        assert_eq!(p.chain_of(1), None);
        let load = t.instruction("load", Some(0)).unwrap();
        assert!(build_serial_loop(&load, 10, &t).is_err());
        assert!(build_serial_loop(&xchg, 0, &t).is_err());
        // nops never chain
        let nop = build_serial_loop(&InstructionSpec::nop(), 3, &t).unwrap();
        assert_eq!(nop.num_chains(), 0);
    }

    #[test]
    fn flush_load_addresses() {
        let t = default_latency_table();
        let miss = build_flush_load_loop(3, true, 1, &t).unwrap();
        let hit = build_flush_load_loop(3, false, 1, &t).unwrap();
        assert_eq!(miss.uop_count(), hit.uop_count());
        let loads = |p: &Program| {
            p.iter().filter(|i| i.kind() == InstKind::Load).map(|i| i.mem_addr().unwrap()).collect::<Vec<_>>()
        };
        let flushes = |p: &Program| {
            p.iter().filter(|i| i.kind() == InstKind::Flush).map(|i| i.mem_addr().unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(loads(&miss), flushes(&miss));
        assert!(loads(&hit).iter().all(|a| !flushes(&hit).contains(a)));
        assert!(build_flush_load_loop(0, true, 1, &t).is_err());
        let p = build_flush_load_loop(7, true, 1, &t).unwrap();
        assert_eq!(p.num_chains(), FLUSH_LOAD_CHAINS as usize);
        assert_eq!(build_flush_load_loop(2, true, 1, &t).unwrap().num_chains(), 2);
    }

    #[test]
    fn rebuild_is_identical() {
        let t = default_latency_table();
        assert_eq!(build_flush_load_loop(5, false, 7, &t).unwrap(), build_flush_load_loop(5, false, 7, &t).unwrap());
        assert_eq!(build_nop_loop(9).unwrap(), build_nop_loop(9).unwrap());
    }
}
