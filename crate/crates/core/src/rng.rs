//! Deterministic random streams.
//!
//! Every stochastic routine takes an explicit generator. Independent streams
//! are derived from a master seed and a path of indices by SplitMix64 mixing,
//! so that `(master, eps index, replica index)` always maps to the same
//! ChaCha stream regardless of scheduling order.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p.wrapping_add(0x5851_F42D))))
}

pub fn stream(master: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, path))
}

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Uniform draw on the open interval (0, 1).
pub fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Standard exponential variate `-ln u`.
pub fn exp1<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    -open_unit(rng).ln()
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| std_normal(rng))
}

/// Rayleigh(1) variate, `sqrt(2 E)` with `E ~ Exp(1)`.
pub fn rayleigh<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    (2.0 * exp1(rng)).sqrt()
}

pub fn rademacher_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
}
