//! The 64-bit hash used for placement weights and object checksums.
//!
//! XXH64 with seed 0. It is a published, portable, non-cryptographic hash;
//! any reimplementation of the placement function must use the same one.

pub use xxhash_rust::xxh64::Xxh64 as StreamingHash;

/// XXH64(bytes, seed = 0).
pub fn h64(bytes: &[u8]) -> u64 {
    xxhash_rust::xxh64::xxh64(bytes, 0)
}

/// Streaming hasher producing the same value as [`h64`] over the
/// concatenation of everything fed to it.
pub fn streaming() -> StreamingHash {
    StreamingHash::new(0)
}

/// Hash of several byte slices as if they were concatenated.
pub fn h64_parts(parts: &[&[u8]]) -> u64 {
    let mut h = streaming();
    for p in parts {
        h.update(p);
    }
    h.digest()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_vectors() {
        // Reference values from the xxHash specification test suite.
        assert_eq!(h64(b""), 0xEF46_DB37_51D8_E999);
        assert_eq!(h64(b"a"), 0xD24E_C4F1_A98C_6E5B);
    }

    #[test]
    fn parts_match_concatenation() {
        assert_eq!(h64_parts(&[b"train/", b"x", b"#t0"]), h64(b"train/x#t0"));
    }
}
