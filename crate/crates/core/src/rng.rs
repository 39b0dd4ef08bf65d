use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Deterministic random stream keyed by `(root_seed, path)`.
///
/// Children are derived by appending a label to the path; the generator of
/// every stream is seeded from a hash of its full key, so a stream's values
/// never depend on how many draws other streams have made.
#[derive(Debug, Clone)]
pub struct RngStream {
    root_seed: u64,
    path: String,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn root(root_seed: u64) -> Self {
        Self::keyed(root_seed, String::new())
    }

    fn keyed(root_seed: u64, path: String) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(root_seed.to_le_bytes());
        hasher.update(path.as_bytes());
        let seed: [u8; 32] = hasher.finalize().into();
        Self {
            root_seed,
            path,
            rng: ChaCha12Rng::from_seed(seed),
        }
    }

    /// Child stream for `label`. Panics on an empty label.
    pub fn derive(&self, label: &str) -> Self {
        assert!(!label.is_empty(), "rng label must be non-empty");
        let path = if self.path.is_empty() {
            label.to_owned()
        } else {
            format!("{}/{}", self.path, label)
        };
        Self::keyed(self.root_seed, path)
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    /// Uniform draw in `[lo, hi)`; returns `lo` for a degenerate interval.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        assert!(lo <= hi, "uniform: lo {lo} > hi {hi}");
        let u: f64 = self.rng.random();
        let v = lo + (hi - lo) * u;
        if v >= hi {
            lo
        } else {
            v
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        let u: f64 = self.rng.random();
        u < p
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Uniform integer in the closed range `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        self.rng.random_range(lo..=hi)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(s: &mut RngStream, n: usize) -> Vec<u64> {
        (0..n).map(|_| s.next_u64()).collect()
    }

    #[test]
    fn same_label_same_sequence() {
        let root = RngStream::root(7);
        let mut a = root.derive("target").derive("epoch=3");
        let mut b = root.derive("target").derive("epoch=3");
        assert_eq!(draws(&mut a, 64), draws(&mut b, 64));
        assert_eq!(a.path(), "target/epoch=3");
    }

    #[test]
    fn different_labels_differ() {
        let root = RngStream::root(7);
        let mut a = root.derive("a");
        let mut b = root.derive("b");
        let da = draws(&mut a, 64);
        let db = draws(&mut b, 64);
        assert!(da.iter().zip(&db).all(|(x, y)| x != y));
    }

    #[test]
    fn independent_of_sibling_consumption() {
        let root = RngStream::root(11);
        let mut sibling = root.derive("x");
        let _ = draws(&mut sibling, 1000);
        let mut a = root.derive("y");
        let mut b = RngStream::root(11).derive("y");
        assert_eq!(draws(&mut a, 16), draws(&mut b, 16));
    }

    #[test]
    fn degenerate_interval() {
        let mut s = RngStream::root(1);
        assert_eq!(s.uniform(0.5, 0.5), 0.5);
    }

    #[test]
    fn uniform_mean_monte_carlo() {
        let mut s = RngStream::root(3).derive("mc");
        let n = 1_000_000;
        let mean = (0..n).map(|_| s.uniform(0.0, 1.0)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.002, "mean {mean}");
    }

    #[test]
    fn uniform_respects_bounds() {
        let mut s = RngStream::root(5);
        for _ in 0..100_000 {
            let v = s.uniform(0.5, 1.0);
            assert!((0.5..1.0).contains(&v));
        }
    }

    #[test]
    #[should_panic]
    fn empty_label_panics() {
        RngStream::root(0).derive("");
    }
}
