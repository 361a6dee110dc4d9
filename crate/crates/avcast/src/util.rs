//! Deterministic RNG derivation and normal sampling shared by the
//! trainer and the evaluation protocols.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// RNG keyed by (seed, tags): the stream is a pure function of its
/// position in the schedule, which makes resumed runs bit-exact.
pub fn derived_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut acc = splitmix64(seed);
    for &t in tags {
        acc = splitmix64(acc ^ t.wrapping_mul(0x9e3779b97f4a7c15));
    }
    ChaCha8Rng::seed_from_u64(acc)
}

/// Standard normal via Box-Muller.
pub fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-300..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn std_normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| std_normal(rng)).collect()
}
