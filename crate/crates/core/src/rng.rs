//! Named random sub-streams derived from one run seed.
//!
//! Every consumer of randomness gets its own ChaCha stream, so changing how
//! many draws one consumer makes never shifts another consumer's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialization (A, B, reconstructor weights).
    Init = 1,
    /// Per-sample CS ratio draws during scalable training.
    Ratios = 2,
    /// Per-epoch batch order.
    Shuffle = 3,
    /// Patch extraction offsets.
    Patches = 4,
    /// Train/validation/test assignment of source images.
    Split = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
