//! Deterministic seed derivation.
//!
//! Every random decision in the crate draws from a ChaCha stream whose seed is
//! derived from a parent seed, a stream name, and an entity key. Derivation
//! uses FNV-1a over the raw bytes, so child seeds are stable across platforms
//! and independent of iteration order at the call site.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Accumulator for building a child seed out of typed components.
#[derive(Debug, Clone, Copy)]
pub struct SeedHasher(u64);

impl SeedHasher {
    pub fn new() -> Self {
        SeedHasher(FNV_OFFSET)
    }

    pub fn bytes(mut self, data: &[u8]) -> Self {
        for &b in data {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
        // Separator byte so concatenated fields cannot alias each other.
        self.0 ^= 0x1f;
        self.0 = self.0.wrapping_mul(FNV_PRIME);
        self
    }

    pub fn u64(self, v: u64) -> Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn str(self, s: &str) -> Self {
        self.bytes(s.as_bytes())
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

impl Default for SeedHasher {
    fn default() -> Self {
        Self::new()
    }
}

/// Child seed for a named stream with a string entity key.
pub fn child_seed(parent: u64, stream: &str, key: &str) -> u64 {
    SeedHasher::new().u64(parent).str(stream).str(key).finish()
}

/// Child seed for a named stream with an integer entity key.
pub fn child_seed_u64(parent: u64, stream: &str, key: u64) -> u64 {
    SeedHasher::new().u64(parent).str(stream).u64(key).finish()
}

/// Child seed for a named stream with a pair of integer keys.
pub fn child_seed_pair(parent: u64, stream: &str, a: u64, b: u64) -> u64 {
    SeedHasher::new().u64(parent).str(stream).u64(a).u64(b).finish()
}

/// The crate-wide RNG, constructed from a derived seed.
pub fn rng_from(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}
