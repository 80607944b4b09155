//! Seed derivation for independent, order-free random streams.
//!
//! Every random draw in a run comes from a stream keyed by
//! `(master seed, client, round, purpose)`, so results never depend on the
//! order in which clients are processed or on the degree of parallelism.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a derived stream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    InitParams = 1,
    RoundPlan = 2,
    LocalUpdate = 3,
    KnowledgeTransfer = 4,
    Partition = 5,
    TrainValSplit = 6,
    SynthMeans = 7,
    SynthSamples = 8,
    SynthTest = 9,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `master` with a splitmix64 chain.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(master), |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

pub fn stream(master: u64, client: u64, round: u64, purpose: Purpose) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, &[client, round, purpose as u64]))
}

/// Stream not tied to a client or round.
pub fn global_stream(master: u64, purpose: Purpose) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, &[purpose as u64]))
}
