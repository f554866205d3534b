//! Reproducible one-dimensional Brownian paths.
//!
//! Each path is generated by a ChaCha8 stream keyed by a seed derived from
//! `(master_seed, path_index)`, so any path can be regenerated on its own,
//! on any thread, bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BrownianPath {
    pub master_seed: u64,
    pub path_index: u64,
    /// Seed of the generator stream of this path.
    pub seed: u64,
    pub dt: f64,
    /// `increments[k] = B(t_{k+1}) - B(t_k)`.
    pub increments: Vec<f64>,
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn path_seed(master_seed: u64, path_index: u64) -> u64 {
    mix(mix(master_seed) ^ path_index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Gaussian increments with mean 0 and variance `dt`.
pub fn sample_brownian(master_seed: u64, path_index: u64, nt: usize, dt: f64) -> Result<BrownianPath> {
    if nt < 1 || !(dt > 0.0) {
        return Err(Error::InvalidParameters(format!("Brownian path needs nt >= 1 and dt > 0, got nt={nt}, dt={dt}")));
    }
    let seed = path_seed(master_seed, path_index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = dt.sqrt();
    let increments = (0..nt)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            s * z
        })
        .collect();
    Ok(BrownianPath { master_seed, path_index, seed, dt, increments })
}

impl BrownianPath {
    /// The zero path (deterministic dynamics).
    pub fn zero(nt: usize, dt: f64) -> Self {
        Self { master_seed: 0, path_index: 0, seed: 0, dt, increments: vec![0.0; nt] }
    }

    pub fn nt(&self) -> usize {
        self.increments.len()
    }

    /// `B(t_k)` for `k = 0..=nt`.
    pub fn values(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.increments.len() + 1);
        let mut acc = 0.0;
        b.push(acc);
        for dw in &self.increments {
            acc += dw;
            b.push(acc);
        }
        b
    }

    pub fn final_value(&self) -> f64 {
        crate::stats::kahan_sum(self.increments.iter().copied())
    }

    /// The same realization seen on a time grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.increments.len() % factor != 0 {
            return Err(Error::InvalidParameters(format!("cannot coarsen {} increments by {factor}", self.increments.len())));
        }
        let increments = self.increments.chunks(factor).map(|c| c.iter().sum()).collect();
        Ok(Self { dt: self.dt * factor as f64, increments, ..self.clone() })
    }

    /// The same realization on a time grid twice as fine, filled in by a
    /// Brownian bridge drawn from a stream derived from this path's seed.
    /// Pairwise sums of the new increments reproduce the old ones.
    pub fn refine(&self) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed ^ 0x6272_6964_6765_0000));
        let dt = 0.5 * self.dt;
        let sd = (0.5 * dt).sqrt();
        let mut increments = Vec::with_capacity(2 * self.increments.len());
        for &db in &self.increments {
            let z: f64 = StandardNormal.sample(&mut rng);
            let first = 0.5 * db + sd * z;
            increments.push(first);
            increments.push(db - first);
        }
        Self { dt, increments, seed: mix(self.seed), ..self.clone() }
    }
}
