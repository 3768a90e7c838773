//! Reproducible random streams.
//!
//! Every random decision in the workbench (variation samples, fault
//! positions, synthetic weights) is drawn from a [`SeededStream`]. Streams are
//! ChaCha8 keyed by a 64-bit seed and a 64-bit stream id, so independent
//! consumers can derive non-overlapping sub-streams from one experiment seed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct SeededStream {
    seed: u64,
    stream: u64,
    counter: u64,
    rng: ChaCha8Rng,
}

impl SeededStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent sub-stream `stream` of `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            seed,
            stream,
            counter: 0,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of draws taken so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        self.counter += 1;
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        self.counter += 1;
        self.rng.sample(StandardNormal)
    }

    pub fn next_bool(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn next_range_i64(&mut self, lo: i64, hi: i64) -> i64 {
        self.counter += 1;
        self.rng.random_range(lo..=hi)
    }

    pub fn next_index(&mut self, n: usize) -> usize {
        self.counter += 1;
        self.rng.random_range(0..n)
    }

    /// `k` distinct indices from `0..n`, in sampling order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        self.counter += 1;
        rand::seq::index::sample(&mut self.rng, n, k.min(n)).into_vec()
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_index(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_replay() {
        let mut a = SeededStream::new(42);
        let mut b = SeededStream::new(42);
        for _ in 0..1_000_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(a.counter(), 1_000_000);
    }

    #[test]
    fn streams_are_independent() {
        let mut a = SeededStream::with_stream(7, 0);
        let mut b = SeededStream::with_stream(7, 1);
        let da: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let db: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(da, db);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut s = SeededStream::new(3);
        for _ in 0..10_000 {
            let u = s.next_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn known_first_draw_is_stable() {
        // Pinned so a dependency bump that changes the generator is caught.
        let mut s = SeededStream::new(0);
        assert_eq!(s.next_u64(), 13080132717333068652);
        assert_eq!(SeededStream::with_stream(7, 3).next_u64(), 3348856302973006449);
    }
}
