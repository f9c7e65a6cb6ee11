//! Seed derivation for independent deterministic RNG streams.
//!
//! Every random decision in the pipeline draws from a stream derived
//! from (base seed, purpose tag, index), so adding a new consumer never
//! perturbs existing ones and runs replay bit-identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Collapse (base, tag, index) into a 64-bit stream seed.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// RNG for one derived stream.
pub fn stream(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}

/// Tensor with entries uniform in [-scale, scale).
pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> crate::tensor::Tensor {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    crate::tensor::Tensor::new(shape.to_vec(), data).unwrap()
}

/// Standard normal draw via Box-Muller; two uniforms per call.
pub fn normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    mean + std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, "scenes", 3), derive_seed(7, "scenes", 3));
        assert_ne!(derive_seed(7, "scenes", 3), derive_seed(7, "scenes", 4));
        assert_ne!(derive_seed(7, "scenes", 3), derive_seed(7, "init", 3));
        assert_ne!(derive_seed(7, "scenes", 3), derive_seed(8, "scenes", 3));
    }

    #[test]
    fn stream_replays_identically() {
        let a: Vec<f64> = stream(42, "noise", 0).sample_iter(rand::distributions::Standard).take(8).collect();
        let b: Vec<f64> = stream(42, "noise", 0).sample_iter(rand::distributions::Standard).take(8).collect();
        assert_eq!(a, b);
    }
}
