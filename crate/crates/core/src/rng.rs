//! Counter-style random streams.
//!
//! Every draw in the crate comes from a ChaCha generator whose key is a hash
//! of `(seed, replicate, label, member)`. Streams never depend on the order in
//! which members are processed, so threaded and sequential runs agree.

use faer::{Col, Mat};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub type Rng = ChaCha12Rng;

/// A family of independent streams sharing `(seed, replicate, label)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StreamFamily {
    pub seed: u64,
    pub replicate: u64,
    pub label: String,
}

impl StreamFamily {
    pub fn new(seed: u64, replicate: u64, label: impl Into<String>) -> Self {
        Self { seed, replicate, label: label.into() }
    }

    /// Sub-family whose label is extended by `suffix`.
    pub fn child(&self, suffix: impl std::fmt::Display) -> Self {
        Self { seed: self.seed, replicate: self.replicate, label: format!("{}/{}", self.label, suffix) }
    }

    /// Generator for one member.
    pub fn member(&self, member: u64) -> Rng {
        let mut h = Sha256::new();
        h.update(b"arbenkf-stream-v1");
        h.update(self.seed.to_le_bytes());
        h.update(self.replicate.to_le_bytes());
        h.update((self.label.len() as u64).to_le_bytes());
        h.update(self.label.as_bytes());
        h.update(member.to_le_bytes());
        let key: [u8; 32] = h.finalize().into();
        Rng::from_seed(key)
    }
}

/// `n` independent standard normal draws.
pub fn normal_col(rng: &mut Rng, n: usize) -> Col<f64> {
    Col::from_fn(n, |_| StandardNormal.sample(rng))
}

/// Matrix whose column `j` holds `nrows` normals from `family.member(j)`.
pub fn normal_columns(family: &StreamFamily, nrows: usize, ncols: usize) -> Mat<f64> {
    let mut out = Mat::zeros(nrows, ncols);
    for j in 0..ncols {
        let mut rng = family.member(j as u64);
        for i in 0..nrows {
            out[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    out
}
