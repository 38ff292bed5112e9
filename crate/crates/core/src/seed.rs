//! Seed splitting.
//!
//! Every random stream in a simulation is derived from one root seed by
//! folding a path of stream labels through SplitMix64:
//!
//! ```text
//! s_0 = root
//! s_{i+1} = splitmix64(s_i ^ splitmix64(label_i + 0x9E3779B97F4A7C15))
//! ```
//!
//! The resulting `u64` seeds a ChaCha8 generator. Streams with different
//! label paths are statistically independent for all practical purposes, and
//! a given path always yields the same stream regardless of thread count or
//! evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `root` along a path of labels.
pub fn derive(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(root, |s, &label| {
        splitmix64(s ^ splitmix64(label.wrapping_add(GOLDEN)))
    })
}

pub fn rng_from(root: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive(root, path))
}

/// Stable label for a string tag, usable in a seed path.
pub fn label(tag: &str) -> u64 {
    // FNV-1a
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}
