//! Seeded random streams.
//!
//! Everything stochastic draws from ChaCha8, which produces the same stream
//! on every platform for a given seed and stream id.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// An independent stream for `(seed, stream)`.
pub fn substream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| gaussian(rng)).collect()
}

/// Entries drawn uniformly from {-1, +1}.
pub fn rademacher_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// Folds the bit patterns of `values` into `seed` (SplitMix64 finalizer).
/// Used to give each scored vector its own probe stream.
pub fn mix_seed(seed: u64, values: &[f64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in values {
        h = splitmix(h ^ v.to_bits());
    }
    splitmix(h ^ values.len() as u64)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
