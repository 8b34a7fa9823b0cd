//! Random sources for share generation.
//!
//! Production paths draw from the OS-seeded `StdRng` (ChaCha12). Tests and
//! campaigns inject a seeded ChaCha20 stream so results are reproducible.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Seedable generator used wherever reproducibility matters.
pub type DeterministicRng = ChaCha20Rng;

pub fn seeded(seed: u64) -> DeterministicRng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Cryptographically strong generator seeded from the operating system.
pub fn production_rng() -> rand::rngs::StdRng {
    rand::rngs::StdRng::from_os_rng()
}

/// Degenerate source that emits one byte value forever.
///
/// Only useful for tests that need to force an all-zero (or constant)
/// authentication share.
#[derive(Clone, Copy, Debug)]
pub struct ConstantRng(pub u8);

impl RngCore for ConstantRng {
    fn next_u32(&mut self) -> u32 {
        u32::from_ne_bytes([self.0; 4])
    }

    fn next_u64(&mut self) -> u64 {
        u64::from_ne_bytes([self.0; 8])
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        dst.fill(self.0);
    }
}
