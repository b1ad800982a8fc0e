//! Seedable, platform-independent random streams.
//!
//! Every stream is a ChaCha8 generator. Sub-streams are derived from a root
//! seed and a label so that, for example, the readout of task 3 is initialised
//! identically regardless of which tasks were trained before it.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed from a parent seed, a task id and a purpose label.
pub fn derive_seed(seed: u64, task_id: usize, label: &str) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(label.as_bytes())) ^ (task_id as u64).wrapping_mul(0xA24B_AED4_963E_E407))
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for `(task_id, label)` under a root seed.
    pub fn stream(seed: u64, task_id: usize, label: &str) -> Self {
        Rng::new(derive_seed(seed, task_id, label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_are_label_and_task_sensitive() {
        let a = derive_seed(7, 0, "head");
        assert_ne!(a, derive_seed(7, 1, "head"));
        assert_ne!(a, derive_seed(7, 0, "side"));
        assert_ne!(a, derive_seed(8, 0, "head"));
        assert_eq!(a, derive_seed(7, 0, "head"));
    }

    #[test]
    fn known_first_value_is_pinned() {
        // ChaCha8 output is specified; this guards against silent algorithm swaps.
        assert_eq!(Rng::new(0).next_u64(), 13_080_132_717_333_068_652);
    }
}
