//! Seed derivation and fixed-algorithm sampling helpers.
//!
//! Every randomized stage owns a generator seeded from (base seed, stream
//! index), so parallel and serial execution visit identical random
//! sequences. Normal deviates use the Box-Muller transform rather than a
//! library sampler so the draw sequence is pinned by this crate alone.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer. Decorrelates consecutive stream indices.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a stream index.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream.wrapping_add(0x51ed_270b)))
}

/// Generator for one derived stream.
pub fn stream_rng(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

/// One pair of independent standard normal deviates (Box-Muller).
pub fn normal_pair<R: Rng>(rng: &mut R) -> (f64, f64) {
    // random::<f64>() is uniform on [0, 1); flip to (0, 1] so ln is finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let phi = std::f64::consts::TAU * u2;
    (r * phi.cos(), r * phi.sin())
}
