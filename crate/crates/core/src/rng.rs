//! Seedable random streams.
//!
//! Every sampling routine takes an explicit generator. Parallel or repeated
//! work derives independent substreams from `(seed, purpose, index)` so the
//! output never depends on how work is scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::C64;

/// Generator used by the simulation pipeline.
pub type SimRng = ChaCha8Rng;

/// Purpose tags that partition the random streams of one experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    IrsTraining = 1,
    Training = 2,
    Validation = 3,
    Test = 4,
    Calibration = 5,
    LmmseFit = 6,
    Init = 7,
    Baseline = 8,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive the seed of substream `index` for `purpose` under `seed`.
pub fn derive_seed(seed: u64, purpose: Purpose, index: u64) -> u64 {
    let a = splitmix64(seed ^ 0x5851_f42d_4c95_7f2d);
    let b = splitmix64(a ^ (purpose as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
    splitmix64(b ^ splitmix64(index))
}

/// Independent generator for `(seed, purpose, index)`.
pub fn substream(seed: u64, purpose: Purpose, index: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, purpose, index))
}

/// One draw of a circularly-symmetric complex Gaussian with unit variance.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * core::f64::consts::FRAC_1_SQRT_2
}

/// Unit-modulus complex number with phase uniform on `[-pi, pi)`.
pub fn random_phase<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let phase = rng.random_range(-core::f64::consts::PI..core::f64::consts::PI);
    C64::from_polar(1.0, phase)
}
