//! Seedable random-number streams with explicit splitting.
//!
//! All stochastic code in the crate draws from [`ChaCha8Rng`] streams derived
//! from a master seed plus a list of integer tags (run phase, step, sample,
//! worker, ...). Streams with different tag paths are independent, and every
//! derivation is a pure function of `(seed, tags)`, so whole experiments replay
//! bit-for-bit from the config seed alone.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::sequence::StateSequence;
use crate::Real;

/// SplitMix64 output function; a well-mixed step for seed derivation.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives independent [`ChaCha8Rng`] streams from a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngFactory {
    seed: u64,
}

impl RngFactory {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A stream keyed by `tags`; equal `(seed, tags)` always yields the same
    /// stream, and distinct tag paths yield independent streams.
    pub fn stream(&self, tags: &[u64]) -> ChaCha8Rng {
        let mut state = self.seed ^ 0xD1B5_4A32_D192_ED03;
        // Absorb the tag path, length-prefixed so [a] and [a, 0] differ.
        state ^= splitmix64(&mut { tags.len() as u64 });
        let mut acc = state;
        for &t in tags {
            let mut s = acc ^ t.wrapping_mul(0xA24B_AED4_963E_E407);
            acc = splitmix64(&mut s) ^ s;
        }
        let mut key = [0u8; 32];
        let mut s = acc;
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }

    /// A factory whose streams are independent of this one's.
    pub fn child(&self, tag: u64) -> RngFactory {
        let mut s = self.seed ^ tag.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        RngFactory::new(splitmix64(&mut s))
    }
}

/// Draws a sequence of i.i.d. standard-normal frames over `start..=end`.
///
/// Elements are drawn state-major (frame by frame, row-major within a frame);
/// every consumer of shared streams relies on this order.
pub fn standard_normal_seq<R: Rng + ?Sized>(
    rng: &mut R,
    start: i64,
    end: i64,
    frame_shape: &[usize],
) -> StateSequence {
    let frame_len: usize = frame_shape.iter().product();
    let n = (end - start + 1) as usize * frame_len;
    let data: Vec<Real> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    StateSequence::from_flat(start, frame_shape, data).expect("nonempty by construction")
}
