//! Deterministic RNG streams.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by the run
//! seed and a purpose-specific stream id, so enabling one source of
//! randomness never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids are namespaced by purpose in the top byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Init = 1,
    Data = 2,
    Split = 3,
    LabelledBatches = 4,
    UnlabelledBatches = 5,
    Affine = 6,
    Colour = 7,
    Mask = 8,
    Mix = 9,
    Vat = 10,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) | (index & ((1 << 56) - 1)));
    rng
}
