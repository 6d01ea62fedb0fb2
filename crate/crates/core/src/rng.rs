//! Counter-based, splittable random streams.
//!
//! Each `(seed, stream_index)` pair addresses an independent ChaCha20
//! keystream, so a sample's noise depends only on its own address and
//! never on how many draws other samples consumed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_index: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_index: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_index);
        Self {
            seed,
            stream_index,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_index(&self) -> u64 {
        self.stream_index
    }

    /// Child stream addressed by `tag`; independent of this stream's
    /// position.
    pub fn derive(&self, tag: u64) -> RngStream {
        RngStream::new(self.seed, mix(self.stream_index ^ mix(tag)))
    }

    /// Child stream addressed by a sequence of tags.
    pub fn derive_path(&self, tags: &[u64]) -> RngStream {
        tags.iter().fold(self.clone(), |s, &t| s.derive(t))
    }

    pub fn gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.gen_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Tensor of i.i.d. standard normal draws.
pub fn sample_gaussian(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gaussian()).collect();
    Tensor::new(shape, data).expect("sample_gaussian: valid shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_address_is_bit_identical() {
        let a = sample_gaussian(&[4, 5], &mut RngStream::new(7, 3));
        let b = sample_gaussian(&[4, 5], &mut RngStream::new(7, 3));
        assert_eq!(a.data(), b.data());
        let c = sample_gaussian(&[4, 5], &mut RngStream::new(7, 4));
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn moments_of_a_million_draws() {
        let x = sample_gaussian(&[1_000_000], &mut RngStream::new(2024, 0));
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let n = 100_000;
        let a = sample_gaussian(&[n], &mut RngStream::new(11, 1));
        let b = sample_gaussian(&[n], &mut RngStream::new(11, 2));
        let (ma, mb) = (a.sum() / n as f64, b.sum() / n as f64);
        let mut cov = 0.0;
        let (mut va, mut vb) = (0.0, 0.0);
        for (x, y) in a.data().iter().zip(b.data()) {
            cov += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        let rho = cov / (va * vb).sqrt();
        assert!(rho.abs() < 0.01, "rho {rho}");
    }

    #[test]
    fn derived_streams_ignore_parent_position() {
        let mut parent = RngStream::new(5, 9);
        let before = parent.derive(3).gaussian();
        parent.gaussian();
        assert_eq!(before, parent.derive(3).gaussian());
    }
}
