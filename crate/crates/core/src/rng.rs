//! Deterministic RNG stream derivation.
//!
//! Every random draw in the crate flows from an explicit `u64` seed through
//! [`stream`]. Parallel or resumable work derives one independent stream per
//! work item (per training step, per sample, per writer), so evaluation order
//! never changes output.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over a label, so streams can be tagged by role ("train", "init", ...).
fn hash_label(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mix a seed with a label and integer coordinates into a single stream key.
pub fn mix(seed: u64, label: &str, parts: &[u64]) -> u64 {
    let mut acc = splitmix64(seed ^ hash_label(label));
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// Derive an independent ChaCha stream for `(seed, label, parts)`.
pub fn stream(seed: u64, label: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, label, parts))
}
