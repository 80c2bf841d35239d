//! Seedable, platform-independent random streams.
//!
//! The generator and the seed-derivation function are part of the on-disk
//! reproducibility contract: split manifests record [`PRNG_CONTRACT`], and any
//! change to the functions in this module must bump it.

use core::hash::Hasher;

use fnv::FnvHasher;

/// Identifier of the stream + seed-derivation contract written into manifests.
pub const PRNG_CONTRACT: &str = "splitmix64/fnv1a-mix/v1";

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Folds a sequence of words into one seed: `fnv1a(namespace)` followed by a
/// `mix64(acc ^ word + gamma)` chain.
pub fn derive_seed(namespace: &str, words: &[u64]) -> u64 {
    let mut acc = fnv1a(namespace.as_bytes());
    for &w in words {
        acc = mix64((acc ^ w).wrapping_add(GOLDEN_GAMMA));
    }
    acc
}

/// Counter-based SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct StreamRng {
    state: u64,
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Stream keyed by a namespace plus integer words, see [`derive_seed`].
    pub fn keyed(namespace: &str, words: &[u64]) -> Self {
        Self::new(derive_seed(namespace, words))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform integer in `0..n` (rejection sampling, no modulo bias).
    ///
    /// # Panics
    /// If `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n) - 1;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return (x % n) as usize;
            }
        }
    }

    /// Uniform float in `[0, 1)` with 53 bits of precision.
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Draws `count` distinct indices from `0..n` in draw order (partial
    /// Fisher-Yates over a sparse permutation). Prefixes are stable: the first
    /// `m` indices of a draw of `count >= m` equal a draw of `m`.
    ///
    /// # Panics
    /// If `count > n`.
    pub fn sample_indices(&mut self, n: usize, count: usize) -> alloc::vec::Vec<usize> {
        assert!(count <= n, "cannot draw {count} of {n}");
        let mut swapped = alloc::collections::BTreeMap::<usize, usize>::new();
        let mut out = alloc::vec::Vec::with_capacity(count);
        for i in 0..count {
            let j = i + self.below(n - i);
            let at_j = *swapped.get(&j).unwrap_or(&j);
            let at_i = *swapped.get(&i).unwrap_or(&i);
            swapped.insert(j, at_i);
            out.push(at_j);
        }
        out
    }
}
