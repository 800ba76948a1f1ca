//! Deterministic seed derivation and the random stream type used everywhere.
//!
//! Every random stream in an experiment is derived from the master seed as
//! `master ^ hash(cell_id, slice_id, tag)`, so adding a cell never perturbs the
//! streams of the existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream used by the simulator, agents and harness.
pub type SimRng = ChaCha8Rng;

/// What a derived stream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamTag {
    /// Traffic and channel draws of training episodes.
    Env,
    /// Exploration and replay sampling of an agent.
    Agent,
    /// Network weight initialization.
    Init,
    /// Evaluation episodes.
    Eval,
    /// Randomized baseline policies.
    Policy,
}

impl StreamTag {
    fn code(self) -> u64 {
        match self {
            StreamTag::Env => 0x656e_76,
            StreamTag::Agent => 0x6167_656e_74,
            StreamTag::Init => 0x696e_6974,
            StreamTag::Eval => 0x6576_616c,
            StreamTag::Policy => 0x706f_6c69_6379,
        }
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream_hash(cell_id: u64, slice_id: u64, tag: StreamTag) -> u64 {
    splitmix64(splitmix64(splitmix64(tag.code()) ^ cell_id) ^ slice_id)
}

/// `master ^ hash(cell_id, slice_id, tag)`.
pub fn sub_seed(master: u64, cell_id: u64, slice_id: u64, tag: StreamTag) -> u64 {
    master ^ stream_hash(cell_id, slice_id, tag)
}

/// Seed of the `index`-th episode (or round, or job) below a stream seed.
pub fn indexed_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
