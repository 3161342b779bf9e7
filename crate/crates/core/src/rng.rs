//! Deterministic seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose seed is
//! derived from a root seed plus a purpose label and indices. Re-deriving a
//! stream from the same inputs is bit-exact, which is what makes training
//! runs, augmentation and checkpoint resume reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; mixes one word into the running state.
fn mix(state: u64, word: u64) -> u64 {
    let mut z = state.wrapping_add(word).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a stream seed from a root seed, a purpose label and indices.
pub fn derive_seed(root: u64, label: &str, indices: &[u64]) -> u64 {
    let mut state = mix(root, 0x6d73_725f_7365_6564); // "msr_seed"
    for byte_chunk in label.as_bytes().chunks(8) {
        let mut word = [0u8; 8];
        word[..byte_chunk.len()].copy_from_slice(byte_chunk);
        state = mix(state, u64::from_le_bytes(word));
    }
    for &ix in indices {
        state = mix(state, ix);
    }
    state
}

/// A deterministic random stream for the given derived seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_stable() {
        let a = derive_seed(7, "views", &[3, 1]);
        let b = derive_seed(7, "views", &[3, 1]);
        assert_eq!(a, b);
    }

    #[test]
    fn labels_and_indices_separate_streams() {
        let base = derive_seed(7, "views", &[0]);
        assert_ne!(base, derive_seed(7, "views", &[1]));
        assert_ne!(base, derive_seed(7, "epoch", &[0]));
        assert_ne!(base, derive_seed(8, "views", &[0]));
    }

    #[test]
    fn stream_draws_are_reproducible() {
        let mut a = stream(42);
        let mut b = stream(42);
        for _ in 0..16 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }
}
