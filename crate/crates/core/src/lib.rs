//! Cycle-level model of one SMT core whose two logical threads share a
//! single retirement stage, plus the experiments built on top of it:
//! retirement characterization, the DI/SI covert channels, a Spectre v1
//! variant decoded through retirement contention, and synthetic
//! program-inference traces.
//!
//! Everything is deterministic for a given configuration and seed.

pub mod channel;
pub mod counters;
pub mod error;
pub mod isa;
pub mod pipeline;
pub mod rng;
pub mod spectre;
pub mod workload;

pub use error::{Error, Result};

/// Global cycle count. Also what the simulated `rdtsc` returns.
pub type Cycle = u64;

/// Clock frequency used to turn cycles into bits per second.
pub const DEFAULT_FREQUENCY_HZ: f64 = 2.9e9;
