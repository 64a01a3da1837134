//! Stable hashing used to derive per-attempt seeds and mock outputs.
//! Must not change between releases: manifests record derived seeds.

use sha2::{Digest, Sha256};

/// First eight bytes (little-endian) of SHA-256 over the concatenated parts.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Seed for generation attempt `attempt` of augmentation slot `slot` of a record.
pub fn attempt_seed(base_seed: u64, record_id: &str, slot: u32, attempt: u32) -> u64 {
    base_seed
        ^ stable_hash(&[
            record_id.as_bytes(),
            &[0],
            &slot.to_le_bytes(),
            &attempt.to_le_bytes(),
        ])
}

/// Seed hint for the `call`-th LLM call issued on behalf of `seed`.
pub fn call_seed(seed: u64, call: u32) -> u64 {
    stable_hash(&[&seed.to_le_bytes(), &call.to_le_bytes()])
}
