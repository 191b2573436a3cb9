//! Content hashing and seed derivation shared across the pipeline.
//!
//! Every hash here is part of the determinism contract: artifact identity,
//! scripted-prompt keys, and stage RNG seeds all flow through these helpers,
//! so the encoding must never change silently. Parts are length-prefixed
//! before hashing so distinct part lists cannot collide by concatenation.

use sha2::{Digest, Sha256};

pub(crate) fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// 32-byte RNG seed derived from a domain tag plus context parts.
///
/// Stages derive independent streams by tagging the same run seed with the
/// stage name and its parameters; two stages never share a raw seed.
pub(crate) fn derive_seed(tag: &str, parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update((tag.len() as u64).to_le_bytes());
    hasher.update(tag.as_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hasher.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_is_stable_and_length_prefixed() {
        let a = sha256_hex(&[b"ab", b"c"]);
        let b = sha256_hex(&[b"a", b"bc"]);
        let c = sha256_hex(&[b"abc"]);
        assert_eq!(a.len(), 64);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(b, c);
        assert_eq!(a, sha256_hex(&[b"ab", b"c"]));
    }

    #[test]
    fn seeds_differ_by_tag() {
        let a = derive_seed("stage-a", &[b"x"]);
        let b = derive_seed("stage-b", &[b"x"]);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed("stage-a", &[b"x"]));
    }
}
