//! Seeded randomness.
//!
//! All stochastic code takes a [`SeededRng`]. Named substreams are derived by
//! hashing the parent seed with a label, so `substream("data")` and
//! `substream("redaction")` never share state and do not depend on how many
//! draws the parent has made.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha12Rng,
}

pub fn make_rng(seed: u64) -> SeededRng {
    SeededRng::new(seed)
}

/// Derives a child seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream identified by `name`.
    pub fn substream(&self, name: &str) -> SeededRng {
        SeededRng::new(derive_seed(self.seed, name, 0))
    }

    /// Independent stream identified by `(name, index)`, e.g. one per training step.
    pub fn substream_indexed(&self, name: &str, index: u64) -> SeededRng {
        SeededRng::new(derive_seed(self.seed, name, index))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn next_seed(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(rng: &mut SeededRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform()).collect()
    }

    #[test]
    fn same_seed_same_stream() {
        assert_eq!(draws(&mut make_rng(42), 1000), draws(&mut make_rng(42), 1000));
    }

    #[test]
    fn different_seeds_differ() {
        let a = draws(&mut make_rng(0), 1000);
        let b = draws(&mut make_rng(1), 1000);
        assert!(a.iter().zip(&b).all(|(x, y)| x != y));
    }

    #[test]
    fn substreams_uncorrelated() {
        let root = make_rng(3);
        let a = draws(&mut root.substream("redaction"), 10_000);
        let b = draws(&mut root.substream("data"), 10_000);
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
        let vb = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
        let corr = cov / (va * vb).sqrt();
        assert!(corr.abs() < 0.05, "corr = {corr}");
    }

    #[test]
    fn substream_ignores_parent_position() {
        let mut root = make_rng(9);
        let before = draws(&mut root.substream("init"), 10);
        let _ = draws(&mut root, 50);
        assert_eq!(before, draws(&mut root.substream("init"), 10));
        assert_ne!(
            draws(&mut root.substream_indexed("step", 0), 10),
            draws(&mut root.substream_indexed("step", 1), 10)
        );
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut v: Vec<usize> = (0..100).collect();
        make_rng(5).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
