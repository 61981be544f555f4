//! Portable seeded randomness.
//!
//! All randomized decisions (split membership, mixed-prompt insertion points)
//! go through ChaCha8 seeded with [`SeedableRng::seed_from_u64`], and the
//! index sampling below is spelled out explicitly so that another
//! implementation can replicate results bit-for-bit:
//!
//! * `below(n)`: draw `x = next_u64()`; reject while `x >= (u64::MAX / n) * n`;
//!   return `x % n`.
//! * `shuffle(v)`: Fisher–Yates from the back, `for i in (1..len).rev() { swap(i, below(i + 1)) }`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

pub struct PortableRng(ChaCha8Rng);

impl PortableRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Generator for a keyed sub-stream, e.g. one per sample id.
    pub fn keyed(seed: u64, key: &str) -> Self {
        Self::new(derive_seed(seed, key))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = (u64::MAX / n) * n;
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct values from `0..n`, in draw order (partial Fisher–Yates).
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct values from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// First 8 bytes (little-endian) of SHA-256 over `seed.to_le_bytes() || key`.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
