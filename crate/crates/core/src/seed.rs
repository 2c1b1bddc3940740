//! Stable seed derivation.
//!
//! Seeds are the first eight bytes (little endian) of
//! `SHA-256(base_le_bytes || 0x1f || part_0 || 0x1f || part_1 ...)`, so they do
//! not depend on the standard library's hasher or on the platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive(base: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for part in parts {
        hasher.update([0x1f]);
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Seed for the simulated annotation of one image: a pure function of the
/// experiment seed, the image identity and the annotation modality.
pub fn image_seed(experiment_seed: u64, image_id: &str, modality_tag: &str) -> u64 {
    derive(experiment_seed, &["image", image_id, modality_tag])
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(base: u64, parts: &[&str]) -> ChaCha8Rng {
    rng(derive(base, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable() {
        // value computed independently with a reference SHA-256
        assert_eq!(image_seed(7, "ds/001", "points:5"), 7919787325803136512);
        assert_ne!(derive(1, &["a"]), derive(2, &["a"]));
        assert_ne!(derive(1, &["ab", "c"]), derive(1, &["a", "bc"]));
        assert_ne!(image_seed(7, "ds/001", "points:5"), image_seed(7, "ds/001", "grid:8"));
    }
}
