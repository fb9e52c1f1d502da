use rand::{Rng as _, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

const STREAM_MUL: u64 = 0xd1b5_4a32_d192_ed03;

/// Deterministic SplitMix64 stream.
///
/// * the state starts at the seed and advances by `0x9e3779b97f4a7c15` per draw,
///   each output being the Stafford "Mix13" finalizer of the state;
/// * [`Rng::uniform`] maps the top 53 bits of one output onto `[0, 1)`;
/// * [`Rng::stream`] derives an independent child seed as the first output of
///   a generator seeded with `seed + stream * 0xd1b54a32d192ed03` (wrapping).
///
/// Identical seeds give identical sequences on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: SplitMix64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    /// Child generator number `stream` of `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut base = SplitMix64::seed_from_u64(seed.wrapping_add(stream.wrapping_mul(STREAM_MUL)));
        Rng::new(base.next_u64())
    }

    /// Splits off a generator seeded by the next output of `self`.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Samples an index from a discrete distribution by inversion.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform() * probs.iter().sum::<f64>();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ() {
        let a = Rng::stream(7, 0).next_u64();
        let b = Rng::stream(7, 1).next_u64();
        assert_ne!(a, b);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = Rng::new(1);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn categorical_respects_zero_mass() {
        let mut r = Rng::new(9);
        for _ in 0..1000 {
            let i = r.categorical(&[0.0, 0.3, 0.0, 0.7]);
            assert!(i == 1 || i == 3);
        }
    }
}
