//! Seeded random streams.
//!
//! All randomness flows from a single `u64` run seed through ChaCha8, which
//! produces the same sequence on every platform. Independent consumers
//! (initialization, prototypes, training, data) read from separate ChaCha
//! streams so that changing how much one consumer draws never shifts the
//! numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named stream identifiers for [`stream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Prototypes = 2,
    Training = 3,
    Data = 4,
    Subsample = 5,
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
