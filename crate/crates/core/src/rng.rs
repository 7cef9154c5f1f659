//! Counter-style RNG streams.
//!
//! Every random draw in the crate comes from a ChaCha stream whose key is the
//! SHA-256 of a tag plus the identifying coordinates (seed, episode id,
//! candidate index, ...). Streams never share state, so results do not depend
//! on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// One coordinate of a stream key.
#[derive(Debug, Clone, Copy)]
pub enum Key<'a> {
    U64(u64),
    Str(&'a str),
}

impl From<u64> for Key<'_> {
    fn from(v: u64) -> Self {
        Key::U64(v)
    }
}

impl From<usize> for Key<'_> {
    fn from(v: usize) -> Self {
        Key::U64(v as u64)
    }
}

impl<'a> From<&'a str> for Key<'a> {
    fn from(v: &'a str) -> Self {
        Key::Str(v)
    }
}

/// SHA-256 over `tag` and the length-prefixed key coordinates.
pub fn digest(tag: &str, keys: &[Key<'_>]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    for k in keys {
        match k {
            Key::U64(v) => {
                h.update([0u8]);
                h.update(v.to_le_bytes());
            }
            Key::Str(s) => {
                h.update([1u8]);
                h.update((s.len() as u64).to_le_bytes());
                h.update(s.as_bytes());
            }
        }
    }
    h.finalize().into()
}

/// Independent generator for the given tag and coordinates.
pub fn stream(tag: &str, keys: &[Key<'_>]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(digest(tag, keys))
}

/// Derive a child seed.
pub fn derive_seed(tag: &str, keys: &[Key<'_>]) -> u64 {
    let d = digest(tag, keys);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
