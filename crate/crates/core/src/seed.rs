//! Content hashing and seed derivation.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

/// SHA-256 digest of raw bytes, rendered as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash([u8; 32]);

impl ContentHash {
    pub fn of(bytes: &[u8]) -> Self {
        ContentHash(Sha256::digest(bytes).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", self.to_hex())
    }
}

impl FromStr for ContentHash {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|e| format!("invalid content hash `{s}`: {e}"))?;
        Ok(ContentHash(out))
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Hash a sequence of labelled parts. Each part is length-prefixed so that
/// `["ab", "c"]` and `["a", "bc"]` never collide.
pub fn hash_parts<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

/// First eight bytes of a digest as a little-endian integer.
pub fn fold_u64(digest: &[u8; 32]) -> u64 {
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Per-stage seed derived from the master seed by stable hashing of the
/// stage name.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    fold_u64(&hash_parts([
        b"dtgen-stage".as_slice(),
        &master.to_le_bytes(),
        stage.as_bytes(),
    ]))
}

/// Seed for the `index`-th item of a stream.
pub fn item_seed(stream_seed: u64, index: u64) -> u64 {
    fold_u64(&hash_parts([
        b"dtgen-item".as_slice(),
        &stream_seed.to_le_bytes(),
        &index.to_le_bytes(),
    ]))
}

/// Portable, value-stable RNG used everywhere a seeded stream is needed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// RNG keyed by arbitrary bytes (e.g. a prompt text).
pub fn rng_from_bytes(key: &[u8]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(hash_parts([b"dtgen-rng".as_slice(), key]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_known_vector() {
        assert_eq!(
            ContentHash::of(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn hex_roundtrip() {
        let h = ContentHash::of(b"plate");
        assert_eq!(h.to_hex().parse::<ContentHash>().unwrap(), h);
        assert!("zz".parse::<ContentHash>().is_err());
    }

    #[test]
    fn stage_seeds_are_independent_and_stable() {
        let a = stage_seed(7, "generate");
        let b = stage_seed(7, "filter");
        assert_ne!(a, b);
        assert_eq!(a, stage_seed(7, "generate"));
        assert_ne!(a, stage_seed(8, "generate"));
    }

    #[test]
    fn length_prefix_separates_parts() {
        assert_ne!(
            hash_parts([b"ab".as_slice(), b"c"]),
            hash_parts([b"a".as_slice(), b"bc"])
        );
    }
}
