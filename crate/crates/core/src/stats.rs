//! Order-independent ensemble reductions.
//!
//! Per-member results are always collected in member order and reduced
//! sequentially with Neumaier compensated summation, so statistics do not
//! depend on the number of worker threads.

use rayon::prelude::*;

/// Neumaier compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn sum(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn kahan_sum(it: impl IntoIterator<Item = f64>) -> f64 {
    let mut k = Kahan::default();
    for x in it {
        k.add(x);
    }
    k.sum()
}

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

pub fn mean_se(xs: &[f64]) -> MeanSe {
    let n = xs.len();
    if n == 0 {
        return MeanSe { mean: 0.0, se: 0.0, n };
    }
    let mean = kahan_sum(xs.iter().copied()) / n as f64;
    if n == 1 {
        return MeanSe { mean, se: 0.0, n };
    }
    let var = kahan_sum(xs.iter().map(|x| (x - mean) * (x - mean))) / (n - 1) as f64;
    MeanSe { mean, se: (var / n as f64).sqrt(), n }
}

/// Nodewise mean and standard error over an ensemble of equally sized vectors.
pub fn nodewise_mean_se(members: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let len = members.first().map_or(0, |m| m.len());
    let col = |i: usize| -> MeanSe {
        let xs: Vec<f64> = members.iter().map(|m| m[i]).collect();
        mean_se(&xs)
    };
    (0..len).map(col).map(|m| (m.mean, m.se)).unzip()
}

/// Maps `f` over `0..n` in parallel and returns the results in index order.
pub fn par_map_ordered<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).into_par_iter().map(f).collect()
}

/// Worker count from `OBSWAVE_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("OBSWAVE_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0)
}

/// Runs `f` inside a pool capped by `OBSWAVE_THREADS` (global pool otherwise).
pub fn with_thread_cap<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match thread_cap() {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}
