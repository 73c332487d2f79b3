//! Seeded randomness. Every stochastic step derives its own ChaCha stream
//! from a root seed plus context (sample index, epoch, ...), so results never
//! depend on iteration order or threading.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type DetRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with context words into a new seed.
pub fn derive_seed(root: u64, context: &[u64]) -> u64 {
    context.iter().fold(splitmix64(root), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn rng_for(root: u64, context: &[u64]) -> DetRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, context))
}

/// Box–Muller standard normal draw.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// Normal draw with standard deviation `std`, resampled until it lies within
/// two standard deviations of zero.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z = standard_normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Fisher–Yates shuffle of `0..n`.
pub fn permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> alloc::vec::Vec<usize> {
    let mut order: alloc::vec::Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}
