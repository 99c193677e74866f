//! Named random substreams derived from a single master seed.
//!
//! Every consumer of randomness (partitioning, selection, per-client training,
//! per-client noise, ...) gets its own ChaCha stream keyed by a tag plus up to
//! two indices. Streams never share state, so results do not depend on the
//! order in which clients execute.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    ModelInit,
    BlobsTrain,
    BlobsTest,
    Partition,
    LocalSplit,
    Profiles,
    Selection { round: u64 },
    Availability { round: u64, client: u64 },
    Train { round: u64, client: u64 },
    Noise { round: u64, client: u64 },
    DpCheck { chunk: u64 },
}

impl Stream {
    fn key(self) -> (u64, u64, u64) {
        match self {
            Stream::ModelInit => (1, 0, 0),
            Stream::BlobsTrain => (2, 0, 0),
            Stream::BlobsTest => (3, 0, 0),
            Stream::Partition => (4, 0, 0),
            Stream::LocalSplit => (5, 0, 0),
            Stream::Profiles => (6, 0, 0),
            Stream::Selection { round } => (7, round, 0),
            Stream::Availability { round, client } => (8, round, client),
            Stream::Train { round, client } => (9, round, client),
            Stream::Noise { round, client } => (10, round, client),
            Stream::DpCheck { chunk } => (11, chunk, 0),
        }
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for a named substream of `master`.
pub fn stream_seed(master: u64, stream: Stream) -> u64 {
    let (tag, a, b) = stream.key();
    let mut h = mix64(master);
    for part in [tag, a, b] {
        h = mix64(h ^ part);
    }
    h
}

pub fn stream(master: u64, stream: Stream) -> StreamRng {
    StreamRng::seed_from_u64(stream_seed(master, stream))
}

pub fn seeded(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}
