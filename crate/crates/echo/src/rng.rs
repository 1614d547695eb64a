//! Deterministic random streams. One master seed fans out into named
//! sub-streams (data, init, mask, noise, ...) so adding draws to one consumer
//! never perturbs another, and every run is bitwise reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a hash of a byte string; stable across platforms and versions.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Named sub-stream of a master seed.
pub fn stream(master: u64, name: &str) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master.to_le_bytes());
    seed[8..16].copy_from_slice(&fnv1a64(name.as_bytes()).to_le_bytes());
    // Differentiate the layout from a plain u64 seed.
    seed[16..24].copy_from_slice(&fnv1a64(b"echo.stream").to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// Sub-stream further keyed by an index (e.g. per-trajectory generation).
pub fn stream_indexed(master: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut full = String::with_capacity(name.len() + 21);
    full.push_str(name);
    full.push('#');
    full.push_str(&index.to_string());
    stream(master, &full)
}
