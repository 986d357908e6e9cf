//! Deterministic random streams.
//!
//! One global seed feeds every module; each consumer derives its own stream
//! from `(seed, module name, index)` so any stage can be rerun in isolation
//! with identical randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::math::Vec3;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable (platform- and version-independent) stream seed.
pub fn stream_seed(seed: u64, module: &str, index: u64) -> u64 {
    // FNV-1a over the module name
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in module.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(seed ^ h).wrapping_add(index))
}

pub fn stream(seed: u64, module: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(stream_seed(seed, module, index))
}

pub fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform direction on the unit sphere.
pub fn unit_vector<R: rand::Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(normal(rng), normal(rng), normal(rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}
