//! Expansion of one user seed into independent named random streams.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Dataset synthesis, shuffling and training noise.
    Data,
    /// Parameter initialization.
    Init,
    /// Reverse-process sampling.
    Sampling,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 0x6461_7461,
            Stream::Init => 0x696e_6974,
            Stream::Sampling => 0x7361_6d70,
        }
    }
}

/// Generator for one named stream of `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// A 64-bit seed drawn from a named stream, for APIs that take plain seeds.
pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
    stream_rng(seed, stream).next_u64()
}

/// Generator for item `index` (an iteration, a sample) within a stream.
pub fn indexed_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream));
    rng.set_stream(index);
    rng
}
