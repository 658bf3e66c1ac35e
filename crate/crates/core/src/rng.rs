//! Seeded RNG construction. All randomness in the crate flows through here
//! so a `(seed, stream)` pair fully determines a run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Independent generator for one consumer of a seed. Distinct `stream`
/// values never share state, so adding a consumer does not perturb others.
pub fn stream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Child seed for a sub-experiment; distinct labels give unrelated seeds.
pub fn derive(seed: u64, label: u64) -> u64 {
    use rand::RngCore;
    stream(seed, label ^ 0xd1b5_4a32_d192_ed03).next_u64()
}
