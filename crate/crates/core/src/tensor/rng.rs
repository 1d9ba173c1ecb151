use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Scalar, Tensor};

/// Reproducible, splittable random source.
///
/// Backed by ChaCha8, which is counter based: a `(seed, stream)` pair fixes
/// the whole output sequence independently of platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a ^ b
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent substream; does not advance `self`.
    pub fn split(&self, index: u64) -> SeededRng {
        Self::with_stream(self.seed, mix(self.stream, index))
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
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_tensor<S: Scalar>(&mut self, shape: &[usize]) -> Tensor<S> {
        let n = shape.iter().product();
        Tensor::raw(shape.to_vec(), (0..n).map(|_| S::lit(self.normal())).collect())
    }

    pub fn normal_tensor_scaled<S: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<S> {
        let n = shape.iter().product();
        Tensor::raw(shape.to_vec(), (0..n).map(|_| S::lit(self.normal() * std)).collect())
    }
}
