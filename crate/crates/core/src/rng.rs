//! Counter-based seeding: every random draw is a pure function of a seed and
//! a tuple of integers, never of enumeration order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one 64-bit key.
pub fn key(seed: u64, words: &[u64]) -> u64 {
    words
        .iter()
        .fold(mix64(seed), |acc, &w| mix64(acc ^ mix64(w)))
}

/// Stream tags keep independent uses of the same (seed, id) apart.
pub mod stream {
    pub const PARTITION: u64 = 0x7061_7274;
    pub const AUGMENT: u64 = 0x6175_676d;
    pub const PERTURB: u64 = 0x7065_7274;
    pub const FEATURE_JITTER: u64 = 0x6a69_7474;
    pub const TRAIN_SHUFFLE: u64 = 0x7368_7566;
    pub const SYNTH: u64 = 0x7379_6e74;
    pub const STUB: u64 = 0x7374_7562;
}

pub fn rng_for(seed: u64, words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(key(seed, words))
}

/// Uniform draw in `[0, 1)` from a key, 53 bits.
pub fn unit_f64(k: u64) -> f64 {
    (k >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
