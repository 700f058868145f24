//! Seeded, counter-addressed random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose key is
//! derived from `(seed, domain, a, b)`. Two streams with the same address
//! produce the same sequence on every platform, and a stream can be rebuilt
//! from its address alone, so resuming from a checkpoint only needs the seed
//! and the global step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Identifies what a stream is used for, so unrelated consumers never share bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
    Synthetic = 4,
    Folds = 5,
    Test = 6,
}

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, domain: Domain, a: u64, b: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Normal draw truncated to `[-2 std, 2 std]` by rejection.
pub fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Fisher-Yates shuffle driven by the given stream.
pub fn shuffle<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
