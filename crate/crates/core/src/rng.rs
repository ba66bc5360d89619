//! Portable seeded randomness.
//!
//! The generator is xoshiro256++ seeded through SplitMix64
//! (`Xoshiro256PlusPlus::seed_from_u64`). Bounded draws use Lemire's
//! multiply-shift with rejection, computed in `u64` regardless of
//! `usize` width, so a seed reproduces the same streams on every platform.
//!
//! Derived streams (per epoch, per worker) are seeded with [`mix`], which is
//! one SplitMix64 finalizer applied to `seed ^ splitmix64(salt)`.

use rand_xoshiro::rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// One step of the SplitMix64 output function applied to `x + gamma`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a salt (epoch, worker index, ...).
pub fn mix(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

#[derive(Debug, Clone)]
pub struct Prng(Xoshiro256PlusPlus);

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    /// Generator for a derived stream, `Prng::new(mix(seed, salt))`.
    pub fn derived(seed: u64, salt: u64) -> Self {
        Prng::new(mix(seed, salt))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform integer in `0..bound`. `bound` must be non-zero.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "Prng::below requires a non-zero bound");
        let mut m = u128::from(self.next_u64()) * u128::from(bound);
        let mut low = m as u64;
        if low < bound {
            let threshold = bound.wrapping_neg() % bound;
            while low < threshold {
                m = u128::from(self.next_u64()) * u128::from(bound);
                low = m as u64;
            }
        }
        (m >> 64) as u64
    }

    /// 128 random bits.
    pub fn next_u128(&mut self) -> u128 {
        (u128::from(self.next_u64()) << 64) | u128::from(self.next_u64())
    }
}

/// In-place forward Fisher–Yates: for `i` in `0..n-1`, swap `items[i]` with
/// `items[i + below(n - i)]`.
///
/// [`crate::Shuffled`] with a buffer at least as large as its input emits
/// exactly this permutation for the same generator state.
pub fn fisher_yates<T>(items: &mut [T], rng: &mut Prng) {
    let n = items.len();
    if n < 2 {
        return;
    }
    for i in 0..n - 1 {
        let j = i + rng.below((n - i) as u64) as usize;
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<u64> = {
            let mut r = Prng::new(42);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let mut r = Prng::new(42);
        let b: Vec<u64> = (0..8).map(|_| r.next_u64()).collect();
        assert_eq!(a, b);
        assert_ne!(Prng::new(43).next_u64(), a[0]);
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = Prng::new(7);
        for bound in [1u64, 2, 3, 10, 1 << 40, u64::MAX] {
            for _ in 0..200 {
                assert!(r.below(bound) < bound);
            }
        }
    }

    #[test]
    fn below_is_roughly_uniform() {
        let mut r = Prng::new(99);
        let mut counts = [0u32; 6];
        for _ in 0..60_000 {
            counts[r.below(6) as usize] += 1;
        }
        for c in counts {
            assert!((9_000..11_000).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn fisher_yates_is_a_permutation() {
        let mut v: Vec<u32> = (0..100).collect();
        fisher_yates(&mut v, &mut Prng::new(5));
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }

    #[test]
    fn mix_separates_salts() {
        assert_ne!(mix(1, 0), mix(1, 1));
        assert_ne!(mix(1, 0), mix(2, 0));
        assert_eq!(mix(1, 5), mix(1, 5));
    }
}
