//! Counter-based random stream.
//!
//! Draws come from ChaCha8 keyed by `seed`, with an independent stream per
//! `stream` id and a 32-bit-word position counter, so the pair
//! `(seed, stream, counter)` pins the whole future sequence. Gaussian draws
//! use the Box–Muller transform on two uniforms.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngState { seed, stream, inner }
    }

    /// Restores a state previously observed through [`RngState::counter`].
    pub fn at(seed: u64, stream: u64, counter: u64) -> Self {
        let mut s = Self::with_stream(seed, stream);
        s.inner.set_word_pos(counter as u128);
        s
    }

    /// Independent child stream; parallel work indexes children by item.
    pub fn derive(&self, index: u64) -> Self {
        let mixed = splitmix(self.seed ^ splitmix(self.stream.wrapping_add(0x9E37_79B9)));
        Self::with_stream(mixed, index)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    fn normal_pair(&mut self) -> (f64, f64) {
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    pub fn normal(&mut self) -> f64 {
        self.normal_pair().0
    }

    pub fn fill_normal<S: Scalar>(&mut self, out: &mut [S]) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.normal_pair();
            pair[0] = S::from_f64(a);
            pair[1] = S::from_f64(b);
        }
        if let [last] = chunks.into_remainder() {
            *last = S::from_f64(self.normal());
        }
    }

    pub fn normal_tensor<S: Scalar>(&mut self, shape: &[usize]) -> Tensor<S> {
        let mut t = Tensor::zeros(shape);
        self.fill_normal(t.data_mut());
        t
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_counter_replays() {
        let mut a = RngState::new(42);
        for _ in 0..7 {
            a.next_u64();
        }
        let c = a.counter();
        let mut b = RngState::at(42, 0, c);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ() {
        let root = RngState::new(1);
        let mut a = root.derive(0);
        let mut b = root.derive(1);
        assert_ne!(a.next_u64(), b.next_u64());
        let mut a2 = root.derive(0);
        assert_eq!(RngState::new(1).derive(0).next_u64(), a2.next_u64());
    }

    #[test]
    fn gaussian_moments_within_five_sigma() {
        let n = 200_000;
        let mut rng = RngState::new(7);
        let mut buf = vec![0.0f64; n];
        rng.fill_normal(&mut buf);
        let mean = buf.iter().sum::<f64>() / n as f64;
        let var = buf.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // sd(mean) = 1/sqrt(n), sd(var) = sqrt(2/(n-1)) for a unit Gaussian
        assert!(mean.abs() < 5.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 5.0 * (2.0 / (n - 1) as f64).sqrt(), "var {var}");
    }

    #[test]
    fn uniform_and_below_ranges() {
        let mut rng = RngState::new(3);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
            assert!(rng.below(5) < 5);
        }
    }
}
