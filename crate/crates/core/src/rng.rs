//! Named random streams derived from one root seed.
//!
//! Every draw in a run is addressed by `(chain, level, iteration, purpose)`,
//! hashed with SplitMix64 into the seed of a fresh ChaCha8 generator. Two
//! streams never share state, so parallel chains and reruns are
//! reproducible bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    /// Initial state of a chain.
    Init = 1,
    /// pCN innovation.
    Proposal = 2,
    /// Uniform for the accept/reject test.
    Accept = 3,
    /// Reference field for synthetic data.
    Reference = 4,
    /// Observation noise.
    ObservationNoise = 5,
    /// Free-standing field samples (`sample-grf`, statistics checks).
    Sample = 6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub chain: u64,
    pub level: u64,
    pub iteration: u64,
    pub purpose: Purpose,
}

impl StreamId {
    pub fn new(chain: usize, level: usize, iteration: u64, purpose: Purpose) -> Self {
        Self {
            chain: chain as u64,
            level: level as u64,
            iteration,
            purpose,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Root seed plus stream addressing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    pub root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn seed_for(&self, id: StreamId) -> u64 {
        let mut h = splitmix64(self.root);
        for word in [id.chain, id.level, id.iteration, id.purpose as u64] {
            h = splitmix64(h ^ word);
        }
        h
    }

    pub fn rng(&self, id: StreamId) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed_for(id))
    }

    /// `len` iid standard normals from the given stream.
    pub fn normals(&self, id: StreamId, len: usize) -> Vec<f64> {
        standard_normals(&mut self.rng(id), len)
    }
}

pub fn standard_normals<R: rand::Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}
