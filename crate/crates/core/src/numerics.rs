//! Dense-vector primitives shared by the rest of the crate.
//!
//! Vectors are plain `[f64]` slices. All arithmetic is 64-bit; the only place
//! 32-bit reals appear is the wire-size accounting in [`crate::metrics`].

use alloc::vec::Vec;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::math;
use crate::{Error, Result};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    math::sqrt(norm_sq(a))
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cosine similarity `aᵀb / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    if a == b {
        return Ok(1.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Temperature softmax `exp(s_k/τ) / Σ_j exp(s_j/τ)` with max-subtraction.
pub fn softmax_temperature(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    let mut out = Vec::with_capacity(scores.len());
    softmax_into(scores, tau, &mut out);
    Ok(out)
}

/// Unchecked softmax used on hot paths; `scores` must be nonempty.
pub(crate) fn softmax_into(scores: &[f64], tau: f64, out: &mut Vec<f64>) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.clear();
    out.extend(scores.iter().map(|s| math::exp((s - max) / tau)));
    let z: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= z;
    }
}

/// `log Σ exp(s_k/τ)` computed stably.
pub(crate) fn log_sum_exp(scores: &[f64], tau: f64) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| math::exp((s - max) / tau)).sum();
    max / tau + math::ln(z)
}

/// Central-difference gradient of `f` at `x`.
///
/// Used as an independent oracle for the analytic gradients.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + eps;
        let up = f(&probe);
        probe[k] = orig - eps;
        let down = f(&probe);
        probe[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteEvaluation(k));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Seeded pseudorandom generator.
///
/// Backed by ChaCha8 (`rand_chacha`), whose output stream is specified
/// independently of platform and word size. Sub-streams for a given purpose
/// (a client, a round) are derived with [`Rng::derive`] so that the order in
/// which workers run cannot change their randomness.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

/// Stream tags used with [`Rng::derive`].
pub mod stream {
    pub const DATA: u64 = 1;
    pub const MODEL_INIT: u64 = 2;
    pub const PROTO_INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const SPLIT: u64 = 6;
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent generator for `(seed, tag, a, b)`.
    pub fn derive(seed: u64, tag: u64, a: u64, b: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(splitmix(tag ^ splitmix(a ^ splitmix(b))));
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gamma(&mut self, shape: f64) -> f64 {
        // shape > 0 is checked by callers
        Gamma::new(shape, 1.0)
            .map(|g| g.sample(&mut self.inner))
            .unwrap_or(0.0)
    }

    pub fn normal_vec(&mut self, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| self.normal()).collect()
    }

    /// Uniformly random direction on the unit sphere.
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let mut v = self.normal_vec(dim);
            let n = norm(&v);
            if n > 1e-12 {
                v.iter_mut().for_each(|x| *x /= n);
                return v;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
