//! Seeded, counter-based random streams.
//!
//! Every stochastic operation in the crate takes an explicit generator. The
//! generators come from [`stream`] and [`substream`], which map a root seed
//! and a stream name onto an independent ChaCha stream, so components can be
//! reseeded in isolation without perturbing one another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut hash: u64) -> u64 {
    for b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// Named stream of the root seed.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.bytes(), FNV_OFFSET));
    rng
}

/// Indexed stream, e.g. one per chain, restart or ensemble member.
pub fn substream(seed: u64, name: &str, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = fnv1a(name.bytes(), FNV_OFFSET);
    rng.set_stream(fnv1a(index.to_le_bytes(), h));
    rng
}

/// Fills a fresh vector with iid standard normal draws.
pub fn standard_normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// One standard normal draw.
pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform draw on [0, 1).
pub fn uniform<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

/// `k` distinct indices from `0..n`, in draw order.
pub fn sample_indices<R: rand::Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, k.min(n)).into_vec()
}
