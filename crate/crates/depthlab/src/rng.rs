//! Deterministic counter-based randomness.
//!
//! Built on ChaCha12, a counter-mode stream cipher: identical (seed, position)
//! yields identical output on every platform. Substreams are derived by mixing
//! tag words into the seed, so embarrassingly parallel simulations can hand
//! every (grid point, trial) its own independent stream and stay order- and
//! thread-count-invariant.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{KernelError, Tensor};

/// splitmix64 finalizer; the standard way to spread a 64-bit seed.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based random stream.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha12Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        let mut s = seed;
        for chunk in key.chunks_mut(8) {
            s = mix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        Self { seed, inner: ChaCha12Rng::from_seed(key) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent child stream from tag words. Children with
    /// different tags never overlap; the parent stream is not consumed.
    pub fn substream(&self, tags: &[u64]) -> Rng {
        let mut s = mix64(self.seed ^ 0xd1b5_4a32_d192_ed03);
        for &t in tags {
            s = mix64(s ^ t);
        }
        Rng::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// I.i.d. Gaussian tensor. `std = 0` degenerates to a constant tensor.
    pub fn gaussian(&mut self, shape: Vec<usize>, mean: f64, std: f64) -> Result<Tensor, KernelError> {
        if std < 0.0 || !std.is_finite() {
            return Err(KernelError::Domain { what: "gaussian std", value: std });
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        if std == 0.0 {
            data.resize(n, mean);
        } else {
            for _ in 0..n {
                data.push(mean + std * self.standard_normal());
            }
        }
        Tensor::new(shape, data)
    }

    /// Bernoulli(p) 0/1 tensor.
    pub fn bernoulli_mask(&mut self, shape: Vec<usize>, p: f64) -> Result<Tensor, KernelError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(KernelError::Domain { what: "bernoulli p", value: p });
        }
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| if self.uniform() < p { 1.0 } else { 0.0 }).collect();
        Tensor::new(shape, data)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
