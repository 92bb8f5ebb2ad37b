//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream keyed by a run seed plus a purpose-specific counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep independent draws from sharing a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Expansion = 1,
    Prototypes = 2,
    SampleNoise = 3,
    Partition = 4,
    Schedule = 5,
    Holdout = 6,
    Mask = 7,
    AdapterInit = 8,
    Reservoir = 9,
    KMeansInit = 10,
    ShallowInit = 11,
    CkaSubset = 12,
}

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `(seed, purpose, counter)`.
pub fn keyed(seed: u64, purpose: Purpose, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(purpose as u64)));
    rng.set_stream(counter);
    rng
}
