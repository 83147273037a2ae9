//! Seeded random streams.
//!
//! Every stream is ChaCha8 keyed by the 64-bit seed (expanded the way
//! `rand_core::SeedableRng::seed_from_u64` does) with the ChaCha stream id
//! selecting an independent substream, so per-document and per-chunk draws
//! do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used by the library, kept disjoint per purpose.
pub(crate) mod streams {
    pub const GLOBAL_INIT: u64 = 1 << 40;
    pub const DOC_INIT: u64 = 2 << 40;
    pub const SAMPLE_CORPUS: u64 = 3 << 40;
    pub const MC_CHUNK: u64 = 4 << 40;
}

/// Mixes a base seed with an index (SplitMix64 finalizer) to get an
/// independent per-item seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
