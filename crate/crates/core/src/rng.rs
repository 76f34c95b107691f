//! Named random streams derived from one run seed.
//!
//! Every consumer of randomness gets its own PCG32 stream (64-bit state,
//! 64-bit stream selector), so changing how often one part of the system
//! draws numbers does not shift any other.

use rand_pcg::Pcg32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Permutations,
    Init,
    GeneratorInit,
    Gates,
    Batches,
    Noise,
    Sampling,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Permutations => 1,
            Stream::Init => 2,
            Stream::GeneratorInit => 3,
            Stream::Gates => 4,
            Stream::Batches => 5,
            Stream::Noise => 6,
            Stream::Sampling => 7,
        }
    }
}

pub type Rng = Pcg32;

/// Independent generator for `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> Rng {
    // splitmix64 finalizer spreads small consecutive seeds over the state space
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    Pcg32::new(z, stream.id())
}
