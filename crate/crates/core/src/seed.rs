//! Deterministic seed splitting. Every consumer of randomness (data synthesis,
//! weight init, shuffling) gets its own stream derived from one root seed.

/// SplitMix64 finalizer; a bijection on `u64`.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `stream` of `root`. Injective in `stream` for a fixed root.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    mix64(mix64(root).wrapping_add(stream))
}

pub const STREAM_DATA: u64 = 1;
pub const STREAM_GENERATOR_INIT: u64 = 2;
pub const STREAM_DISCRIMINATOR_INIT: u64 = 3;
pub const STREAM_SHUFFLE: u64 = 4;
