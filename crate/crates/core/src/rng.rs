//! One global seed fanned out into named, independent random streams.
//!
//! A generator is derived from `(seed, stream, index)` alone, so a consumer
//! can be re-created at any step without replaying earlier draws. This is
//! what makes resumed runs continue bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    World,
    Routes,
    Annotation,
    Init,
    Batches,
    Reward,
    SpeakerSampling,
    Dropout,
    AugmentPool,
    Eval,
    PretrainFollower,
    PretrainSpeaker,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::World => 1,
            Stream::Routes => 2,
            Stream::Annotation => 3,
            Stream::Init => 4,
            Stream::Batches => 5,
            Stream::Reward => 6,
            Stream::SpeakerSampling => 7,
            Stream::Dropout => 8,
            Stream::AugmentPool => 9,
            Stream::Eval => 10,
            Stream::PretrainFollower => 11,
            Stream::PretrainSpeaker => 12,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes several words into one seed.
pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(&[seed, stream.tag(), index]))
}
