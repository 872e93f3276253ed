//! Seeded random streams and small sampling helpers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere in the crate.
pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from a root seed and a path of labels.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(root: u64, path: &[u64]) -> SimRng {
    seeded(derive_seed(root, path))
}

/// Samples an index from an unnormalized-safe probability vector.
///
/// Falls back to the last index with positive mass when rounding leaves the
/// uniform draw past the cumulative total.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Precomputed cumulative table for repeated sampling from one distribution.
#[derive(Debug, Clone)]
pub struct Categorical {
    cumulative: Vec<f64>,
    index: Vec<usize>,
}

impl Categorical {
    pub fn new(probs: &[f64]) -> Self {
        let mut cumulative = Vec::new();
        let mut index = Vec::new();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                cumulative.push(acc);
                index.push(i);
            }
        }
        if index.is_empty() {
            cumulative.push(1.0);
            index.push(0);
        }
        Self { cumulative, index }
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random::<f64>() * self.cumulative[self.cumulative.len() - 1];
        for (k, &c) in self.cumulative.iter().enumerate() {
            if u < c {
                return self.index[k];
            }
        }
        self.index[self.index.len() - 1]
    }

    pub fn is_point_mass(&self) -> bool {
        self.index.len() == 1
    }
}
