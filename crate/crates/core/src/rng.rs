//! Deterministic, labeled random streams.
//!
//! Every stochastic choice in the project draws from a stream derived from
//! `(seed, label)`. Streams with distinct labels are statistically independent
//! and insensitive to each other's draw counts, so adding a consumer never
//! perturbs unrelated randomness. Identical seeds reproduce runs bitwise on
//! every platform (ChaCha8 is pure integer arithmetic).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One splitmix64 step: increments the state and returns a mixed output.
/// Used only for seed derivation, never as the user-facing generator.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a label into a 64-bit value (FNV-1a), order-sensitive.
fn fold_label(label: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive an independent ChaCha8 stream from a base seed and a label.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut state = seed ^ fold_label(label);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Standard-normal draw. `rand_distr`'s ziggurat is platform-deterministic
/// but version-sensitive; this inverse-free polar method is frozen here so
/// stored artifacts never shift under dependency upgrades.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.random_range(-1.0..1.0);
        let v: f64 = rng.random_range(-1.0..1.0);
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * (-2.0 * s.ln() / s).sqrt();
        }
    }
}

/// Uniform draw in [0, 1).
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0.0..1.0)
}

/// Uniform integer in [0, n).
pub fn below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    assert!(n > 0, "below() requires a non-empty range");
    rng.random_range(0..n)
}

/// Fisher-Yates shuffle, deterministic under the stream.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seed_and_label_reproduce_bitwise() {
        let mut a = stream(42, "init/layers.0");
        let mut b = stream(42, "init/layers.0");
        for _ in 0..100 {
            assert_eq!(normal(&mut a).to_bits(), normal(&mut b).to_bits());
        }
    }

    #[test]
    fn distinct_labels_decorrelate() {
        let mut a = stream(42, "alpha");
        let mut b = stream(42, "beta");
        let collisions = (0..64).filter(|_| normal(&mut a) == normal(&mut b)).count();
        assert_eq!(collisions, 0);
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = stream(7, "moments");
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
