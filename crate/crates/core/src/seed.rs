//! Stream-independent seed derivation.
//!
//! Every random draw in a simulation is keyed by a tuple such as
//! `(master_seed, run, client, round)`. Hashing the tuple, instead of drawing
//! sequentially from one generator, keeps results independent of the order
//! in which clients are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep seeds for different purposes apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Partition = 2,
    Adversary = 3,
    Poison = 4,
    Train = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a list of words into a single 64-bit seed.
pub fn derive(master: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream_seed(master: u64, stream: Stream, parts: &[u64]) -> u64 {
    let mut all = Vec::with_capacity(parts.len() + 1);
    all.push(stream as u64);
    all.extend_from_slice(parts);
    derive(master, &all)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
