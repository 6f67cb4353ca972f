use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Child seed for stream `index` of a root seed: SplitMix64 finalizer applied
/// to `root + (index + 1) * golden_gamma`.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    let mut z = root.wrapping_add((index.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
