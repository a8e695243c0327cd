//! Seed derivation for independent, reproducible random streams.
//!
//! Every stream is keyed by `(master, client, round, purpose)` so that a
//! client's randomness in one round does not depend on which other clients
//! participated or how much randomness they consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Client id used for server-side streams.
pub const SERVER: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Select = 2,
    LocalTrain = 3,
    Finetune = 4,
    PseudoTrain = 5,
    Split = 6,
    Probe = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, client: u64, round: u64, purpose: Purpose) -> u64 {
    [client, round, purpose as u64]
        .into_iter()
        .fold(splitmix(master), |acc, part| splitmix(acc ^ splitmix(part)))
}

pub fn stream(master: u64, client: u64, round: u64, purpose: Purpose) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, client, round, purpose))
}
