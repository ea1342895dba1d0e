//! Seed derivation. Every random stream in the crate is keyed from a small
//! tuple of integers so that results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of keys into one 64-bit seed.
pub fn derive(keys: &[u64]) -> u64 {
    keys.iter()
        .fold(0x5EED_u64, |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn rng(keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(keys))
}

// Stream tags, so two consumers given the same user seed never share a stream.
pub(crate) const TAG_QUANTIZER: u64 = 0x5150;
pub(crate) const TAG_MODEL_INIT: u64 = 0x1417;
pub(crate) const TAG_MASK_EPOCH: u64 = 0x3A5C;
pub(crate) const TAG_MASK_CLIP: u64 = 0x3A5D;
pub(crate) const TAG_DROPOUT: u64 = 0xD809;
pub(crate) const TAG_SHUFFLE: u64 = 0x5F1E;
pub(crate) const TAG_SYNTH: u64 = 0x5717;
pub(crate) const TAG_PROBE: u64 = 0x960B;
