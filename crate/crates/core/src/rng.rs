//! Counter-based deterministic random numbers.
//!
//! Every draw is a pure function of (seed, stream words), so parallel or
//! reordered sampling cannot perturb randomness: the draw for a given
//! (group, pixel, channel) is the same no matter how the schedule is
//! batched. Mixing is a splitmix64-style avalanche per word.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A 64-bit value keyed by the seed and an arbitrary word tuple.
pub fn stream_u64(seed: u64, words: &[u64]) -> u64 {
    let mut h = mix64(seed ^ 0x6A09_E667_F3BC_C909);
    for &w in words {
        h = mix64(h.wrapping_add(w.wrapping_mul(GAMMA)) ^ w.rotate_left(23));
    }
    mix64(h)
}

/// Uniform in [0, 1) with 53 bits of precision.
pub fn stream_unit(seed: u64, words: &[u64]) -> f64 {
    (stream_u64(seed, words) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform in [-bound, bound].
pub fn stream_uniform(seed: u64, words: &[u64], bound: f64) -> f64 {
    (2.0 * stream_unit(seed, words) - 1.0) * bound
}

/// Uniform integer in [0, n).
pub fn stream_index(seed: u64, words: &[u64], n: usize) -> usize {
    debug_assert!(n > 0);
    // 64-bit multiply-shift; bias is negligible for desk-scale n.
    ((stream_u64(seed, words) as u128 * n as u128) >> 64) as usize
}

/// Inverse-CDF draw from a categorical distribution given by `probs`
/// (assumed to sum to ~1). Clamps to the last index so accumulated
/// rounding can never fall off the end.
pub fn categorical(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}
