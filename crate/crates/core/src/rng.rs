//! Seed derivation.
//!
//! Every random quantity is drawn from a ChaCha8 stream whose seed is derived
//! by hashing a parent seed with a label, so draws for one market or one
//! variable never depend on how many numbers another stream consumed:
//!
//! ```text
//! replication seed = hash64(master seed, scenario name, replication index)
//! market seed      = derive(replication seed, market index)
//! variable stream  = derive(market seed, variable tag)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `index` under `parent`.
pub fn derive(parent: u64, index: u64) -> u64 {
    splitmix64(parent ^ splitmix64(index.wrapping_mul(GOLDEN).wrapping_add(1)))
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Seed of replication `index` of scenario `label`.
pub fn hash64(master: u64, label: &str, index: u64) -> u64 {
    derive(derive(master, fnv1a(label.as_bytes())), index)
}

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Variable tags for per-market substreams.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Stream {
    Structure = 1,
    DemandChars = 2,
    CostChars = 3,
    Errors = 4,
}

pub fn market_stream(dataset_seed: u64, market: u64, var: Stream) -> ChaCha8Rng {
    stream(derive(derive(dataset_seed, market), var as u64))
}
