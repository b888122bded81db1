//! Seed derivation. All randomness flows from explicit `u64` seeds through
//! ChaCha streams so that results do not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a label into an independent child seed.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    // FNV-1a over the label, then splitmix to decorrelate.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(base ^ splitmix64(h))
}

pub fn stream(base: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, label))
}

pub fn normal<F: Real>(rng: &mut ChaCha8Rng, std: f64) -> F {
    let z: f64 = StandardNormal.sample(rng);
    F::from_f64_lossy(z * std)
}

/// Normal sample redrawn until it falls within two standard deviations.
pub fn trunc_normal<F: Real>(rng: &mut ChaCha8Rng, std: f64) -> F {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return F::from_f64_lossy(z * std);
        }
    }
}
