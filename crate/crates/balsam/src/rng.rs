//! Deterministic keyed RNG streams.
//!
//! Every random draw in the crate comes from a stream keyed by
//! (master seed, purpose tag, entity index). Streams are independent of
//! execution order, so per-subject generation and per-chain sampling can be
//! parallelized without changing any output.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags separating the random streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Covariates,
    RandomEffects,
    EventTime,
    Censoring,
    Measurement,
    ChainInit,
    Chain,
    Replicate,
}

impl StreamKind {
    fn tag(self) -> u64 {
        match self {
            StreamKind::Covariates => 0x636f_7661,
            StreamKind::RandomEffects => 0x7261_6e66,
            StreamKind::EventTime => 0x6576_656e,
            StreamKind::Censoring => 0x6365_6e73,
            StreamKind::Measurement => 0x6d65_6173,
            StreamKind::ChainInit => 0x696e_6974,
            StreamKind::Chain => 0x6368_6169,
            StreamKind::Replicate => 0x7265_706c,
        }
    }
}

/// SplitMix64 finalizer; decorrelates nearby keys.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for (seed, kind, index).
pub fn stream(seed: u64, kind: StreamKind, index: u64) -> ChaCha8Rng {
    let key = mix(mix(seed ^ kind.tag()).wrapping_add(index));
    ChaCha8Rng::seed_from_u64(key)
}
