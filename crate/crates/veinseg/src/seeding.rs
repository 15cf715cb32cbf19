//! Deterministic sub-seed derivation.
//!
//! Every run takes one top-level seed; modules derive their own streams by
//! mixing tags through splitmix64 so no two consumers share a stream.

/// splitmix64 step.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mix an ordered list of parts into one seed.
pub fn mix_seeds(parts: &[u64]) -> u64 {
    let mut acc = 0x517cc1b727220a95u64;
    for &p in parts {
        acc = splitmix64(acc ^ p.wrapping_mul(0xff51afd7ed558ccd));
    }
    acc
}

/// Named stream tags keep module seeds disjoint by construction.
pub fn stream_seed(root: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut acc = root;
    for b in tag.bytes() {
        acc = splitmix64(acc ^ b as u64);
    }
    mix_seeds(&[acc, mix_seeds(parts)])
}
