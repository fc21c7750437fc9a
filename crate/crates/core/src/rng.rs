//! Deterministic random streams and string hashing.

use rand::{Rng, SeedableRng};
pub use rand_xoshiro::SplitMix64;

/// 64-bit FNV-1a hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

pub fn split_mix(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Unit-norm vector drawn uniformly from `[-1, 1)^dim` by a SplitMix64 stream.
pub fn hashed_unit_vector(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = split_mix(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Unit vector keyed by the FNV-1a hash of `text`.
pub fn text_unit_vector(text: &str, dim: usize) -> Vec<f64> {
    hashed_unit_vector(fnv1a64(text.as_bytes()), dim)
}
