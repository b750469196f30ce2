//! Deterministic RNG substreams.
//!
//! Every source of randomness in the pipeline draws from a stream derived
//! from a base seed plus a purpose label and indices. Derivation is a fixed
//! hash, so results never depend on call order, thread count, or platform
//! hasher seeds.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Mix a base seed with a label and indices into a fresh 64-bit seed.
pub fn derive_seed(base: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET ^ base, label.as_bytes());
    for &i in indices {
        h = fnv1a(h, &i.to_le_bytes());
    }
    splitmix64(h)
}

/// A named substream: independent of every other (label, indices) pair.
pub fn substream(base: u64, label: &str, indices: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, label, indices))
}
