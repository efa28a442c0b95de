//! Seed derivation. Every random draw in the crate comes from a ChaCha
//! stream keyed by the run seed and a fixed per-purpose stream id.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const CODEBOOK: u64 = 1;
    pub const ENCODERS: u64 = 2;
    pub const DECODER: u64 = 3;
    pub const STAGE1_SHUFFLE: u64 = 4;
    pub const STAGE1_DROPOUT: u64 = 5;
    pub const STAGE2_SHUFFLE: u64 = 6;
    pub const NEGATIVES: u64 = 7;
    pub const CATALOG: u64 = 8;
    pub const PAIRS: u64 = 9;
    pub const SYNTHETIC: u64 = 10;
}

pub fn derive(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
