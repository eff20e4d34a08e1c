//! Deterministic, portable random number generation.
//!
//! Everything stochastic in this crate draws from [`SplitRng`], a SplitMix64
//! generator seeded by a single `u64`. Substreams are derived from the root
//! seed and a string label, so the draw order of one consumer never perturbs
//! another (backbone init, adapter init, data generation and batch shuffling
//! each own a substream). The same seed reproduces the same bits on every
//! platform.

/// FNV-1a 64-bit hash. Used for substream labels, config fingerprints and
/// parameter digests; stable across platforms.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// SplitMix64 stream with label-derived substreams.
#[derive(Debug, Clone)]
pub struct SplitRng {
    seed: u64,
    state: u64,
    cached_normal: Option<f64>,
}

impl SplitRng {
    pub fn new(seed: u64) -> Self {
        SplitRng { seed, state: seed, cached_normal: None }
    }

    /// Seed this stream was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent substream. The derivation uses only the root
    /// seed and the label, so it is insensitive to how many values have
    /// already been drawn from `self`.
    pub fn substream(&self, label: &str) -> SplitRng {
        let mut s = self.seed ^ fnv1a64(label.as_bytes());
        // one scrambling round so nearby seeds map to distant states
        let derived = splitmix64(&mut s);
        SplitRng::new(derived)
    }

    /// Substream keyed by a label and an index (per-epoch shuffles, per-cell runs).
    pub fn substream_indexed(&self, label: &str, index: u64) -> SplitRng {
        let mut s = self.seed ^ fnv1a64(label.as_bytes()) ^ index.wrapping_mul(0x9e3779b97f4a7c15);
        let derived = splitmix64(&mut s);
        SplitRng::new(derived)
    }

    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller; the paired value is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_scaled(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    pub fn fill_normal(&mut self, out: &mut [f64], std: f64) {
        for v in out.iter_mut() {
            *v = self.normal_scaled(0.0, std);
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        for i in (1..v.len()).rev() {
            let j = self.below(i + 1);
            v.swap(i, j);
        }
    }

    /// Index drawn from unnormalized non-negative weights.
    pub fn weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0);
        let mut x = self.next_f64() * total;
        for (i, &w) in weights.iter().enumerate() {
            x -= w;
            if x < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SplitRng::new(42);
        let mut b = SplitRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn substreams_are_order_independent() {
        let mut root = SplitRng::new(7);
        let before = root.substream("data");
        let _ = root.next_u64();
        let _ = root.next_u64();
        let after = root.substream("data");
        assert_eq!(before.state, after.state);
    }

    #[test]
    fn substreams_differ_by_label() {
        let root = SplitRng::new(7);
        let mut a = root.substream("backbone");
        let mut b = root.substream("adapter");
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_mean_is_sane() {
        let mut rng = SplitRng::new(1);
        let n = 20_000;
        let mean = (0..n).map(|_| rng.next_f64()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = SplitRng::new(3);
        let n = 40_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn shuffle_is_deterministic_and_a_permutation() {
        let mut a: Vec<u32> = (0..50).collect();
        let mut b: Vec<u32> = (0..50).collect();
        SplitRng::new(9).shuffle(&mut a);
        SplitRng::new(9).shuffle(&mut b);
        assert_eq!(a, b);
        let mut c = a.clone();
        c.sort();
        assert_eq!(c, (0..50).collect::<Vec<u32>>());
    }

    #[test]
    fn weighted_respects_weights() {
        let mut rng = SplitRng::new(11);
        let mut counts = [0usize; 2];
        for _ in 0..6000 {
            counts[rng.weighted(&[1.0, 3.0])] += 1;
        }
        let frac = counts[1] as f64 / 6000.0;
        assert!((frac - 0.75).abs() < 0.03, "frac {frac}");
    }
}
