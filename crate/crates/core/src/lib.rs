//! Gated kNN-MT decoding engine.
//!
//! A frozen next-token model exposes its decoder hidden state; a key-value
//! datastore of those hidden states revises the model's distribution through
//! nearest-neighbour retrieval; a small trained gate (the selector) decides per
//! token whether retrieval is worth paying for.
//!
//! The crate is `no_std` with `alloc`. Everything that touches the file
//! system, the wall clock or the command line lives in the `gknn` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod datastore;
pub mod decode;
pub mod error;
pub mod evalbench;
pub mod knnprob;
pub mod model;
pub mod numerics;
pub mod selector;
pub mod toygen;

pub use error::{Error, Result};

/// Token id inside a [`toygen::Vocabulary`].
pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
/// Number of reserved ids at the start of every vocabulary.
pub const NUM_SPECIALS: usize = 4;

/// Deterministic random stream used everywhere a seed is accepted.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's random stream from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
