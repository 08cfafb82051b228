//! Seed derivation used everywhere randomness appears.
//!
//! Sub-seeds are derived by splitmix64-mixing the global seed with stream
//! tags (sample ids, epoch numbers, method names). Derivation is a pure
//! function of its inputs, so augmentation draws do not depend on batch
//! order and per-method seeds do not depend on scheduling.

/// splitmix64 finalizer: one mixing round over a 64-bit state.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over bytes; used to fold string tags (sample ids, method names)
/// into the seed stream. Stable across runs, unlike `DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a sub-seed from a global seed and an ordered list of parts.
/// Each part is absorbed with one splitmix64 round.
pub fn derive_seed(global_seed: u64, parts: &[u64]) -> u64 {
    let mut s = splitmix64(global_seed);
    for &p in parts {
        s = splitmix64(s ^ p);
    }
    s
}

/// Seed for one augmentation draw: mixes (global_seed, hash(id), epoch).
pub fn sample_seed(global_seed: u64, sample_id: &str, epoch: u64) -> u64 {
    derive_seed(global_seed, &[fnv1a64(sample_id.as_bytes()), epoch])
}
