//! Counter-keyed random streams: every (seed, key...) tuple gets its own ChaCha stream,
//! so results do not depend on the order in which units are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key path into a 64-bit stream id.
pub fn mix(key: &[u64]) -> u64 {
    key.iter()
        .fold(0x243F_6A88_85A3_08D3, |h, &k| splitmix(h ^ splitmix(k)))
}

pub fn stream(seed: u64, key: &[u64]) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(mix(key));
    rng
}

/// Named sub-stream tags.
pub mod tag {
    pub const SYNTH_KEY: u64 = 1;
    pub const SYNTH_VALUE: u64 = 2;
    pub const SYNTH_CENTERS: u64 = 3;
    pub const HEAVY: u64 = 4;
    pub const BLOCKS: u64 = 5;
    pub const KMEANS: u64 = 6;
    pub const SORT: u64 = 7;
    pub const QUERIES: u64 = 8;
}
