//! Seeded random streams with named derivation.
//!
//! Every stochastic routine takes an explicit generator. Independent tasks
//! get independent streams derived as `hash(master seed, task label)`, so
//! adding a consumer never perturbs an existing stream and two arms of an
//! experiment can share exactly the data streams they are meant to share.

use super::DenseMatrix;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Stable 64-bit label hash (FNV-1a); not DefaultHasher, whose output may
/// change between toolchains.
fn hash_label(label: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in label.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Derived seed for a named sub-task of `master`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    splitmix64(splitmix64(master) ^ hash_label(label))
}

/// Deterministic generator remembering the seed it was built from, so
/// sub-streams derive from the seed rather than from consumption position.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for a named sub-task. Derivation depends only on
    /// the seed this generator was created with, never on how much of the
    /// parent stream has been consumed.
    pub fn derive(&self, label: &str) -> Rng {
        Rng::from_seed(derive_seed(self.seed, label))
    }

    /// Standard normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn gen_u64(&mut self) -> u64 {
        self.inner.gen::<u64>()
    }
}

/// Matrix of i.i.d. standard normals, filled in row-major order.
pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
    assert!(rows > 0 && cols > 0, "zero-dimension matrix");
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(rng.standard_normal());
    }
    DenseMatrix {
        rows,
        cols,
        data,
    }
}
