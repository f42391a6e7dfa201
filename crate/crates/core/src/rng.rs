//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by a
//! user seed plus a stream id, so that e.g. trajectory 17's noise does not
//! depend on how many other trajectories ran before it or on which thread.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Kept in the high bits of the stream id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Instance = 0,
    InitialState = 1,
    Noise = 2,
    Sampling = 3,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) | (index & 0xffff_ffff_ffff));
    rng
}
