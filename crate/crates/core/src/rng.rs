//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! generator keyed by the run seed and one of the fixed stream ids below, so
//! changing how one consumer uses randomness never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: u64 = 0;
pub const STREAM_SHUFFLE: u64 = 1;
pub const STREAM_DROPOUT: u64 = 2;
pub const STREAM_SYNTH: u64 = 3;
pub const STREAM_NOISE: u64 = 4;
pub const STREAM_SPLIT: u64 = 5;
pub const STREAM_SUBSET: u64 = 6;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
