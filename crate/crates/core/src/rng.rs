//! Seeded stream derivation. Every source of randomness in a run is a ChaCha
//! stream addressed by (master seed, client, purpose), so replays are exact
//! and concurrent clients never share generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// What a stream is for. Each client owns one stream per purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    /// Uniform sample selection from the local dataset.
    DataSampling = 0,
    /// Gaussian perturbation inside the local solver.
    SolverNoise = 1,
    /// Uplink coordinate mask draws.
    Mask = 2,
    /// Anything global to the run (dataset generation, partitioning).
    Global = 3,
}

/// Deterministic per-(client, purpose) stream under one master seed.
pub fn client_stream(master_seed: u64, client_id: u32, kind: StreamKind) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(((client_id as u64) << 2) | kind as u64);
    rng
}

/// Stream for run-global draws, addressed by a small purpose tag.
pub fn global_stream(master_seed: u64, tag: u32) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(u64::MAX - tag as u64);
    rng
}
