//! Seeded random streams. Every stochastic step in the crate derives its
//! generator from a 64-bit seed through these helpers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Mat;

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a salt into a seed (splitmix64 finalizer) to obtain an
/// independent-looking sub-seed.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_mat(rng: &mut StreamRng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| scale * normal(rng))
}

/// Rounds every entry to the nearest 32-bit float, so the value survives
/// persistence unchanged.
pub fn round_f32(m: &mut Mat) {
    m.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}
